//! The HTTP/JSON API. Handlers authenticate, then hand the call to a
//! blocking thread running the matching [`Service`] operation.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, FromRequestParts, Multipart, Path, Query, State};
use axum::http::header::{ACCEPT, AUTHORIZATION, CONTENT_DISPOSITION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use casbatch_core::admin::JobFilter;
use casbatch_core::ferris::WheelRegistry;
use casbatch_core::model::{JobId, JobKind, JobState, TableFormat, Timestamp, WsId};
use casbatch_core::mydb::{formats, NeighborRequest};
use casbatch_core::service::{Service, SubmitRequest};
use casbatch_core::Error;

const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub svc: Service,
    pub wheels: Option<Arc<WheelRegistry>>,
}

pub fn status_for(e: &Error) -> StatusCode {
    use Error::*;
    match e {
        AuthFailed => StatusCode::UNAUTHORIZED,
        NotOwner(_) | NotMember(_) | NotPublished(_) => StatusCode::FORBIDDEN,
        UnknownUser(_) | UnknownJob(_) | UnknownTarget(_) | UnknownQueue(_) | UnknownContext { .. }
        | UnknownGroup(_) | UnknownTable(_) | UnknownToken => StatusCode::NOT_FOUND,
        TableExists(_) | StaleState(_) | AlreadyTerminal(_) | DuplicateContext { .. } | IllegalTransition { .. }
        | Canceled => StatusCode::CONFLICT,
        Gone => StatusCode::GONE,
        Rejected { .. } | MalformedInto(_) | MissingInto(_) | Invalid(_) | RadiusOutOfRange(_)
        | MissingCoordinates(_) | Ineligible(_) | EmptyInput | DegenerateBins(_) => StatusCode::UNPROCESSABLE_ENTITY,
        Parse { .. } | Engine(_) => StatusCode::BAD_REQUEST,
        QuantumExceeded => StatusCode::REQUEST_TIMEOUT,
        QuotaExceeded { .. } => StatusCode::INSUFFICIENT_STORAGE,
        TargetUnavailable(_) | NoMyDbTarget | UnreachableLocator(_) => StatusCode::SERVICE_UNAVAILABLE,
        Sink(_) | Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

/// Error body: `{"error": <kind>, "message": <text>}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_for(&self.0);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let body = ErrorBody { error: self.0.kind().into(), message: self.0.to_string() };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> casbatch_core::Result<T> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(Error::Io(std::io::Error::other(e.to_string())))),
    }
}

/// `Basic base64(ws_id:password)`.
pub fn parse_basic(header: &str) -> Option<(i64, String)> {
    let b64 = header.strip_prefix("Basic ").or_else(|| header.strip_prefix("basic "))?;
    let raw = base64::engine::general_purpose::STANDARD.decode(b64.trim()).ok()?;
    let text = String::from_utf8(raw).ok()?;
    let (ws, pw) = text.split_once(':')?;
    Some((ws.trim().parse().ok()?, pw.to_string()))
}

/// The authenticated caller.
pub struct Caller(pub WsId);

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let (ws, pw) = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(parse_basic)
            .ok_or(ApiError(Error::AuthFailed))?;
        let svc = state.svc.clone();
        let user = blocking(move || svc.authenticate(ws, &pw)).await?;
        Ok(Caller(user.ws_id))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/jobs", post(submit).get(list_jobs))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/jobs/{id}/cancel", post(cancel))
        .route("/v1/jobs/{id}/resubmit", post(resubmit))
        .route("/v1/quick", post(quick))
        .route("/v1/mydb/tables", get(tables))
        .route("/v1/mydb/tables/{table}", delete(drop_table).get(table))
        .route("/v1/mydb/import", post(import))
        .route("/v1/mydb/export", post(export))
        .route("/v1/mydb/neighbors", post(neighbors))
        .route("/v1/groups/{group}/publish", post(publish))
        .route("/v1/download/{token}", get(download))
        .route("/v1/metrics", get(metrics))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn submit(State(st): State<AppState>, Caller(ws): Caller, Json(req): Json<SubmitRequest>) -> ApiResult<Response> {
    let job = blocking(move || st.svc.submit(ws, &req)).await?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn list_jobs(
    State(st): State<AppState>,
    Caller(ws): Caller,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let filter = JobFilter {
        state: q.get("state").filter(|s| !s.is_empty()).map(|s| JobState::parse(s)).transpose()?,
        kind: q.get("kind").filter(|s| !s.is_empty()).map(|s| JobKind::parse(s)).transpose()?,
        since: q.get("since").map(|s| parse_ms(s)).transpose()?,
        until: q.get("until").map(|s| parse_ms(s)).transpose()?,
    };
    let jobs = blocking(move || st.svc.jobs(ws, &filter)).await?;
    Ok(Json(jobs).into_response())
}

fn parse_ms(s: &str) -> casbatch_core::Result<Timestamp> {
    s.parse().map(Timestamp).map_err(|_| Error::Invalid(format!("bad timestamp {s:?}")))
}

async fn job(State(st): State<AppState>, Caller(ws): Caller, Path(id): Path<i64>) -> ApiResult<Response> {
    let job = blocking(move || st.svc.job(ws, JobId(id))).await?;
    Ok(Json(job).into_response())
}

async fn cancel(State(st): State<AppState>, Caller(ws): Caller, Path(id): Path<i64>) -> ApiResult<Response> {
    let job = blocking(move || st.svc.cancel(ws, JobId(id))).await?;
    Ok(Json(job).into_response())
}

async fn resubmit(State(st): State<AppState>, Caller(ws): Caller, Path(id): Path<i64>) -> ApiResult<Response> {
    let job = blocking(move || st.svc.resubmit(ws, JobId(id))).await?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

#[derive(Deserialize)]
struct QuickRequest {
    query: String,
    #[serde(default)]
    context: Option<String>,
}

async fn quick(
    State(st): State<AppState>,
    Caller(ws): Caller,
    headers: HeaderMap,
    Json(req): Json<QuickRequest>,
) -> ApiResult<Response> {
    let wants_csv =
        headers.get(ACCEPT).and_then(|v| v.to_str().ok()).is_some_and(|a| a.contains("text/csv"));
    let res = blocking(move || st.svc.quick(ws, &req.query, req.context.as_deref())).await?;
    if wants_csv {
        let mut buf = Vec::new();
        formats::write_rowset(&mut buf, TableFormat::Csv, "result", &res.rows.columns, &res.rows.rows)?;
        let mut resp = (StatusCode::OK, [(CONTENT_TYPE, "text/csv")], buf).into_response();
        resp.headers_mut().insert("x-casbatch-job", res.job_id.0.into());
        resp.headers_mut().insert("x-casbatch-truncated", (res.truncated as i64).into());
        Ok(resp)
    } else {
        Ok(Json(res).into_response())
    }
}

async fn tables(State(st): State<AppState>, Caller(ws): Caller) -> ApiResult<Response> {
    Ok(Json(blocking(move || st.svc.tables(ws)).await?).into_response())
}

async fn table(State(st): State<AppState>, Caller(ws): Caller, Path(t): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(move || st.svc.table(ws, &t)).await?).into_response())
}

async fn drop_table(State(st): State<AppState>, Caller(ws): Caller, Path(t): Path<String>) -> ApiResult<Response> {
    blocking(move || st.svc.drop_table(ws, &t)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

/// Multipart fields: `table`, `format` (csv or votable; default csv) and
/// `file`.
async fn import(State(st): State<AppState>, Caller(ws): Caller, mut form: Multipart) -> ApiResult<Response> {
    let bad = |m: String| ApiError(Error::Invalid(m));
    let (mut table, mut format, mut data) = (None, TableFormat::Csv, None);
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        match field.name().unwrap_or("") {
            "table" => table = Some(field.text().await.map_err(|e| bad(e.to_string()))?),
            "format" => format = TableFormat::parse(&field.text().await.map_err(|e| bad(e.to_string()))?)?,
            "file" => data = Some(field.bytes().await.map_err(|e| bad(e.to_string()))?),
            _ => {}
        }
    }
    let table = table.ok_or_else(|| bad("missing field: table".into()))?;
    let data = data.ok_or_else(|| bad("missing field: file".into()))?;
    let info = blocking(move || st.svc.import(ws, &table, format, std::io::Cursor::new(data))).await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

#[derive(Deserialize)]
struct ExportRequest {
    table: String,
    #[serde(default = "default_format")]
    format: TableFormat,
}

fn default_format() -> TableFormat {
    TableFormat::Csv
}

async fn export(State(st): State<AppState>, Caller(ws): Caller, Json(req): Json<ExportRequest>) -> ApiResult<Response> {
    let job = blocking(move || st.svc.export(ws, &req.table, req.format)).await?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn neighbors(State(st): State<AppState>, Caller(ws): Caller, Json(req): Json<NeighborRequest>) -> ApiResult<Response> {
    let info = blocking(move || st.svc.neighbors(ws, &req)).await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

#[derive(Deserialize)]
struct PublishRequest {
    table: String,
    #[serde(default)]
    alias: Option<String>,
}

async fn publish(
    State(st): State<AppState>,
    Caller(ws): Caller,
    Path(group): Path<String>,
    Json(req): Json<PublishRequest>,
) -> ApiResult<Response> {
    let p = blocking(move || st.svc.publish(ws, &group, &req.table, req.alias.as_deref())).await?;
    Ok(Json(p).into_response())
}

pub fn content_type(f: TableFormat) -> &'static str {
    match f {
        TableFormat::Csv => "text/csv",
        TableFormat::VoTable => "application/x-votable+xml",
        TableFormat::Json => "application/json",
    }
}

async fn download(State(st): State<AppState>, Caller(ws): Caller, Path(token): Path<String>) -> ApiResult<Response> {
    let tok = token.clone();
    let (path, format) = blocking(move || st.svc.download(ws, &tok)).await?;
    let file = tokio::fs::File::open(&path).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ApiError(Error::Gone),
        _ => ApiError(Error::Io(e)),
    })?;
    let body = Body::from_stream(tokio_util::io::ReaderStream::new(file));
    let disposition = format!("attachment; filename=\"{token}.{}\"", format.extension());
    Ok(([(CONTENT_TYPE, content_type(format).to_string()), (CONTENT_DISPOSITION, disposition)], body).into_response())
}

async fn metrics(State(st): State<AppState>, Caller(_): Caller) -> ApiResult<Response> {
    let wheels: Vec<_> = st
        .wheels
        .as_ref()
        .map(|w| {
            w.snapshot()
                .into_iter()
                .map(|(context, table, reads, served)| {
                    let n = w.n_buckets() as f64;
                    let savings = if served > 0 { 1.0 - reads as f64 / (served as f64 * n) } else { 0.0 };
                    json!({
                        "context": context,
                        "table": table,
                        "bucket_reads": reads,
                        "riders_served": served,
                        "io_savings": savings,
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(Json(json!({ "wheels": wheels })).into_response())
}

/// A server running on its own runtime thread; stopped on drop.
pub struct RunningServer {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RunningServer {
    /// Binds `addr` (use port 0 for any free port) and serves in the
    /// background.
    pub fn start(state: AppState, addr: &str) -> std::io::Result<RunningServer> {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
        let local = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(state);
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async move {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(RunningServer { addr: local, stop: Some(tx), thread: Some(thread) })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop();
    }
}
