//! Blocking HTTP client for the casbatch API.

use std::path::Path;
use std::time::Duration;

use reqwest::blocking::{multipart, Client as Http, RequestBuilder, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use casbatch_core::model::{JobRecord, TableFormat};
use casbatch_core::mydb::{MyDbTableInfo, NeighborRequest};
use casbatch_core::service::{QuickResult, SubmitRequest};

use crate::server::ErrorBody;

#[derive(Debug)]
pub enum ClientError {
    /// The server answered with an error status.
    Api { status: u16, kind: String, message: String },
    Transport(String),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Api { status, kind, message } => write!(f, "{status} {kind}: {message}"),
            ClientError::Transport(m) => write!(f, "transport error: {m}"),
        }
    }
}

impl std::error::Error for ClientError {}

impl From<reqwest::Error> for ClientError {
    fn from(e: reqwest::Error) -> Self {
        ClientError::Transport(e.to_string())
    }
}

impl From<std::io::Error> for ClientError {
    fn from(e: std::io::Error) -> Self {
        ClientError::Transport(e.to_string())
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    ws_id: i64,
    password: String,
    http: Http,
}

impl Client {
    pub fn new(base: &str, ws_id: i64, password: &str) -> ClientResult<Self> {
        let http = Http::builder().timeout(Duration::from_secs(3600)).build()?;
        Ok(Client { base: base.trim_end_matches('/').to_string(), ws_id, password: password.to_string(), http })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn auth(&self, rb: RequestBuilder) -> RequestBuilder {
        rb.basic_auth(self.ws_id, Some(&self.password))
    }

    fn send(&self, rb: RequestBuilder) -> ClientResult<Response> {
        let resp = self.auth(rb).send()?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => ClientError::Api { status: status.as_u16(), kind: b.error, message: b.message },
            Err(_) => ClientError::Api {
                status: status.as_u16(),
                kind: status.canonical_reason().unwrap_or("error").to_string(),
                message: text,
            },
        })
    }

    fn json<T: DeserializeOwned>(&self, rb: RequestBuilder) -> ClientResult<T> {
        Ok(self.send(rb)?.json()?)
    }

    pub fn health(&self) -> ClientResult<Value> {
        Ok(self.http.get(self.url("/v1/health")).send()?.json()?)
    }

    pub fn submit(&self, query: &str, queue: Option<&str>, context: Option<&str>) -> ClientResult<JobRecord> {
        let req = SubmitRequest {
            query: query.to_string(),
            queue: queue.map(str::to_string),
            context: context.map(str::to_string),
        };
        self.json(self.http.post(self.url("/v1/jobs")).json(&req))
    }

    pub fn job(&self, id: i64) -> ClientResult<JobRecord> {
        self.json(self.http.get(self.url(&format!("/v1/jobs/{id}"))))
    }

    pub fn jobs(&self, state: Option<&str>, kind: Option<&str>) -> ClientResult<Vec<JobRecord>> {
        let mut q = Vec::new();
        if let Some(s) = state {
            q.push(("state", s));
        }
        if let Some(k) = kind {
            q.push(("kind", k));
        }
        self.json(self.http.get(self.url("/v1/jobs")).query(&q))
    }

    pub fn cancel(&self, id: i64) -> ClientResult<JobRecord> {
        self.json(self.http.post(self.url(&format!("/v1/jobs/{id}/cancel"))))
    }

    pub fn resubmit(&self, id: i64) -> ClientResult<JobRecord> {
        self.json(self.http.post(self.url(&format!("/v1/jobs/{id}/resubmit"))))
    }

    pub fn quick(&self, query: &str, context: Option<&str>) -> ClientResult<QuickResult> {
        self.json(self.http.post(self.url("/v1/quick")).json(&json!({ "query": query, "context": context })))
    }

    /// The quick answer as CSV text.
    pub fn quick_csv(&self, query: &str, context: Option<&str>) -> ClientResult<String> {
        let rb = self
            .http
            .post(self.url("/v1/quick"))
            .header(reqwest::header::ACCEPT, "text/csv")
            .json(&json!({ "query": query, "context": context }));
        Ok(self.send(rb)?.text()?)
    }

    pub fn tables(&self) -> ClientResult<Vec<MyDbTableInfo>> {
        self.json(self.http.get(self.url("/v1/mydb/tables")))
    }

    pub fn table(&self, name: &str) -> ClientResult<MyDbTableInfo> {
        self.json(self.http.get(self.url(&format!("/v1/mydb/tables/{name}"))))
    }

    pub fn drop_table(&self, name: &str) -> ClientResult<()> {
        self.send(self.http.delete(self.url(&format!("/v1/mydb/tables/{name}"))))?;
        Ok(())
    }

    pub fn upload(&self, table: &str, format: TableFormat, file: &Path) -> ClientResult<MyDbTableInfo> {
        let data = std::fs::read(file)?;
        let fname = file.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_else(|| "upload".into());
        let form = multipart::Form::new()
            .text("table", table.to_string())
            .text("format", format.as_str().to_string())
            .part("file", multipart::Part::bytes(data).file_name(fname));
        self.json(self.http.post(self.url("/v1/mydb/import")).multipart(form))
    }

    pub fn export(&self, table: &str, format: TableFormat) -> ClientResult<JobRecord> {
        self.json(self.http.post(self.url("/v1/mydb/export")).json(&json!({ "table": table, "format": format })))
    }

    pub fn neighbors(&self, req: &NeighborRequest) -> ClientResult<MyDbTableInfo> {
        self.json(self.http.post(self.url("/v1/mydb/neighbors")).json(req))
    }

    pub fn publish(&self, group: &str, table: &str, alias: Option<&str>) -> ClientResult<Value> {
        self.json(
            self.http.post(self.url(&format!("/v1/groups/{group}/publish"))).json(&json!({ "table": table, "alias": alias })),
        )
    }

    pub fn metrics(&self) -> ClientResult<Value> {
        self.json(self.http.get(self.url("/v1/metrics")))
    }

    /// Fetches an output URL (as returned in `output_url`) into `out`.
    pub fn fetch(&self, output_url: &str, out: &mut impl std::io::Write) -> ClientResult<u64> {
        let url = if output_url.starts_with("http") { output_url.to_string() } else { self.url(output_url) };
        let mut resp = self.send(self.http.get(url))?;
        Ok(resp.copy_to(out)?)
    }

    /// Polls `id` until it reaches a terminal state, sleeping with
    /// exponential backoff from 100 ms up to 5 s.
    pub fn wait(&self, id: i64, timeout: Option<Duration>) -> ClientResult<JobRecord> {
        let started = std::time::Instant::now();
        let mut delay = Duration::from_millis(100);
        loop {
            let job = self.job(id)?;
            if job.state.is_terminal() {
                return Ok(job);
            }
            if let Some(t) = timeout.filter(|t| started.elapsed() >= *t) {
                return Err(ClientError::Api {
                    status: StatusCode::REQUEST_TIMEOUT.as_u16(),
                    kind: "Timeout".into(),
                    message: format!("job {id} still {} after {:?}", job.state.as_str(), t),
                });
            }
            std::thread::sleep(delay);
            delay = (delay * 2).min(Duration::from_secs(5));
        }
    }
}
