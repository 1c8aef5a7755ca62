//! The operation set behind the HTTP API. Every call opens its own admin
//! connection; nothing is kept between calls, so any number of service
//! instances may share one admin database.

use std::io::BufRead;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::admin::{AdminDb, JobFilter, NewJob};
use crate::engine::{self, StopHandle};
use crate::error::{Error, Result};
use crate::executor::{self, QuickLimits, RowSet};
use crate::metrics::QueryStat;
use crate::model::{
    JobEvent, JobId, JobKind, JobRecord, JobState, QueueMode, TableFormat, Timestamp, UserRecord, WsId,
};
use crate::mydb::{self, MyDbTableInfo, NeighborRequest};
use crate::rewriter::{self, tokenizer, RewriteEnv};
use crate::scheduler;

pub const DEFAULT_QUEUE: &str = "long";
const IMPORT_QUEUE: &str = "long";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub query: String,
    #[serde(default)]
    pub queue: Option<String>,
    #[serde(default)]
    pub context: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuickResult {
    pub job_id: JobId,
    #[serde(flatten)]
    pub rows: RowSet,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct Service {
    admin_db: PathBuf,
    quota_bytes: u64,
}

impl Service {
    pub fn new(admin_db: impl Into<PathBuf>) -> Self {
        Service { admin_db: admin_db.into(), quota_bytes: mydb::DEFAULT_QUOTA_BYTES }
    }

    pub fn with_quota(mut self, bytes: u64) -> Self {
        self.quota_bytes = bytes;
        self
    }

    pub fn admin(&self) -> Result<AdminDb> {
        AdminDb::open(&self.admin_db)
    }

    /// Checks a credential. Unknown users and wrong passwords fail alike.
    pub fn authenticate(&self, ws_id: i64, password: &str) -> Result<UserRecord> {
        let admin = self.admin()?;
        match admin.user(WsId(ws_id)) {
            Ok(u) if crate::auth::verify_password(password, &u.password_hash) => Ok(u),
            Ok(_) => Err(Error::AuthFailed),
            Err(Error::UnknownUser(_)) => {
                crate::auth::dummy_verify(password);
                Err(Error::AuthFailed)
            }
            Err(e) => Err(e),
        }
    }

    fn default_context(admin: &AdminDb, queue: &str) -> Result<String> {
        admin
            .targets()?
            .into_iter()
            .filter(|t| t.serves_queue(queue))
            .find_map(|t| t.context_names.first().cloned())
            .ok_or_else(|| Error::UnknownContext { context: String::new(), queue: queue.to_string() })
    }

    fn known_contexts(admin: &AdminDb) -> Result<Vec<String>> {
        let mut out: Vec<String> = Vec::new();
        for t in admin.targets()? {
            for c in t.context_names {
                if !out.iter().any(|o| o.eq_ignore_ascii_case(&c)) {
                    out.push(c);
                }
            }
        }
        Ok(out)
    }

    fn rewrite(admin: &AdminDb, ws: WsId, query: &str) -> Result<rewriter::RewriteResult> {
        if rewriter::needs_mydb(query) {
            mydb::ensure_mydb(admin, ws)?;
        }
        let user = admin.user(ws)?;
        let memberships = admin.memberships(ws)?;
        let published = admin.published_for(ws)?;
        let known = Self::known_contexts(admin)?;
        let rules = admin.rules()?;
        let env = RewriteEnv {
            user: &user,
            memberships: &memberships,
            published: &published,
            known_contexts: &known,
            rules: &rules,
        };
        rewriter::rewrite(query, &env)
    }

    /// Screens and rewrites eagerly, then queues the job.
    pub fn submit(&self, ws: WsId, req: &SubmitRequest) -> Result<JobRecord> {
        let admin = self.admin()?;
        let queue_id = req.queue.as_deref().unwrap_or(DEFAULT_QUEUE);
        let queue = admin.queue(queue_id)?;
        if queue.mode != QueueMode::Async {
            return Err(Error::Invalid(format!("queue {queue_id} is synchronous; use the quick endpoint")));
        }
        let context = match &req.context {
            Some(c) => c.clone(),
            None => Self::default_context(&admin, queue_id)?,
        };
        let target = admin.target_for(&context, queue_id)?;
        let rw = Self::rewrite(&admin, ws, &req.query)?;
        if rw.dest_table.is_none() && is_select(&rw.clean_sql) {
            return Err(Error::MissingInto(queue_id.to_string()));
        }
        if let Some((_, table)) = &rw.dest_table {
            let h = mydb::ensure_mydb(&admin, ws)?;
            if engine::table_exists(&h.open()?, "main", table)? {
                return Err(Error::TableExists(table.clone()));
            }
        }
        let id = admin.insert_job(&NewJob {
            user_id: ws,
            queue_id: queue.queue_id,
            target_id: target.target_id,
            context: target
                .context_names
                .iter()
                .find(|c| c.eq_ignore_ascii_case(&context))
                .cloned()
                .unwrap_or(context),
            job_kind: JobKind::Query,
            query_text: req.query.clone(),
            rewritten_text: rw.clean_sql,
            dest_table: rw.dest_table.map(|(_, t)| t),
            format: None,
            t_submitted: Timestamp::now(),
        })?;
        admin.job(id)
    }

    pub fn job(&self, ws: WsId, id: JobId) -> Result<JobRecord> {
        let job = self.admin()?.job(id)?;
        if job.user_id != ws {
            return Err(Error::NotOwner(id.0));
        }
        Ok(job)
    }

    pub fn jobs(&self, ws: WsId, filter: &JobFilter) -> Result<Vec<JobRecord>> {
        self.admin()?.list_jobs(ws, filter)
    }

    pub fn cancel(&self, ws: WsId, id: JobId) -> Result<JobRecord> {
        scheduler::request_cancel(&self.admin()?, id, ws, Timestamp::now())
    }

    /// Queues a fresh copy of one of the caller's jobs.
    pub fn resubmit(&self, ws: WsId, id: JobId) -> Result<JobRecord> {
        let old = self.job(ws, id)?;
        match old.job_kind {
            JobKind::Query => self.submit(
                ws,
                &SubmitRequest { query: old.query_text, queue: Some(old.queue_id), context: Some(old.context) },
            ),
            JobKind::Export => {
                let table = old.dest_table.ok_or_else(|| Error::Invalid("export without a table".into()))?;
                self.export(ws, &table, old.format.unwrap_or(TableFormat::Csv))
            }
            JobKind::Import => Err(Error::Invalid("imports cannot be resubmitted; upload the file again".into())),
        }
    }

    /// Runs a query in the quick queue and returns its rows. The run is
    /// recorded as a job like any other.
    pub fn quick(&self, ws: WsId, query: &str, context: Option<&str>) -> Result<QuickResult> {
        let admin = self.admin()?;
        let queue = admin.quick_queue()?;
        let context = match context {
            Some(c) => c.to_string(),
            None => Self::default_context(&admin, &queue.queue_id)?,
        };
        let target = admin.target_for(&context, &queue.queue_id)?;
        let rw = Self::rewrite(&admin, ws, query)?;
        if rw.dest_table.is_some() {
            return Err(Error::Invalid("INTO MyDB needs a batch queue".into()));
        }
        let id = admin.insert_job(&NewJob {
            user_id: ws,
            queue_id: queue.queue_id.clone(),
            target_id: target.target_id,
            context,
            job_kind: JobKind::Query,
            query_text: query.to_string(),
            rewritten_text: rw.clean_sql,
            dest_table: None,
            format: None,
            t_submitted: Timestamp::now(),
        })?;
        let job = admin.transition(id, JobEvent::Start, Timestamp::now(), None)?;
        admin.set_route(id, scheduler::ROUTE_PRIVATE)?;
        let t0 = std::time::Instant::now();
        let limits = QuickLimits {
            quantum: Duration::from_secs_f64(queue.quantum_s),
            max_rows: queue.max_rows.map(|n| n as usize),
        };
        let stop = StopHandle::new();
        let run = (|| {
            let attachments = executor::attachments_for(&admin, &job)?;
            let conn = engine::open_execution(&attachments, &stop)?;
            executor::run_quick(&conn, &rewriter::top_to_limit(&job.rewritten_text), limits, &stop)
        })();
        let now = Timestamp::now();
        let rows = run.as_ref().map(|o| o.rows().rows.len() as i64).unwrap_or(0);
        let _ = admin.record_stat(&QueryStat {
            job_id: id,
            elapsed_s: t0.elapsed().as_secs_f64(),
            rows,
            cpu_s: 0.0,
            t_finished: now,
        });
        match run {
            Ok(outcome) => {
                admin.set_rows_out(id, rows)?;
                admin.transition(id, JobEvent::Complete, now, None)?;
                let truncated = outcome.is_truncated();
                Ok(QuickResult { job_id: id, rows: outcome.into_rows(), truncated })
            }
            Err(e) => {
                let note = match &e {
                    Error::QuantumExceeded => "quantum exceeded".to_string(),
                    e => e.to_string(),
                };
                let _ = admin.transition(id, JobEvent::Fail, now, Some(&note));
                Err(e)
            }
        }
    }

    pub fn tables(&self, ws: WsId) -> Result<Vec<MyDbTableInfo>> {
        mydb::list_tables(&self.admin()?, ws)
    }

    pub fn table(&self, ws: WsId, table: &str) -> Result<MyDbTableInfo> {
        mydb::table_info(&self.admin()?, ws, table)
    }

    pub fn drop_table(&self, ws: WsId, table: &str) -> Result<()> {
        mydb::drop_table(&self.admin()?, ws, table)
    }

    /// Loads an uploaded file into a new MyDB table, recorded as an Import job.
    pub fn import(&self, ws: WsId, table: &str, format: TableFormat, input: impl BufRead) -> Result<MyDbTableInfo> {
        let admin = self.admin()?;
        let h = mydb::ensure_mydb(&admin, ws)?;
        let id = admin.insert_job(&NewJob {
            user_id: ws,
            queue_id: IMPORT_QUEUE.into(),
            target_id: h.target.target_id,
            context: h.name.clone(),
            job_kind: JobKind::Import,
            query_text: format!("IMPORT {table} ({})", format.as_str()),
            rewritten_text: String::new(),
            dest_table: Some(table.to_string()),
            format: Some(format),
            t_submitted: Timestamp::now(),
        })?;
        admin.transition(id, JobEvent::Start, Timestamp::now(), None)?;
        match mydb::import_table(&admin, ws, input, format, table, self.quota_bytes) {
            Ok(info) => {
                admin.set_rows_out(id, info.row_count)?;
                admin.transition(id, JobEvent::Complete, Timestamp::now(), None)?;
                Ok(info)
            }
            Err(e) => {
                let _ = admin.transition(id, JobEvent::Fail, Timestamp::now(), Some(&e.to_string()));
                Err(e)
            }
        }
    }

    /// Queues an export; the scheduler writes the file and sets output_url.
    pub fn export(&self, ws: WsId, table: &str, format: TableFormat) -> Result<JobRecord> {
        let admin = self.admin()?;
        let info = mydb::table_info(&admin, ws, table)?;
        let h = mydb::existing(&admin, ws)?.ok_or_else(|| Error::UnknownTable(table.to_string()))?;
        let id = admin.insert_job(&NewJob {
            user_id: ws,
            queue_id: DEFAULT_QUEUE.into(),
            target_id: h.target.target_id,
            context: h.name,
            job_kind: JobKind::Export,
            query_text: format!("EXPORT {} ({})", info.name, format.as_str()),
            rewritten_text: String::new(),
            dest_table: Some(info.name),
            format: Some(format),
            t_submitted: Timestamp::now(),
        })?;
        admin.job(id)
    }

    pub fn neighbors(&self, ws: WsId, req: &NeighborRequest) -> Result<MyDbTableInfo> {
        mydb::neighbors(&self.admin()?, ws, req, self.quota_bytes)
    }

    pub fn publish(&self, ws: WsId, group: &str, table: &str, alias: Option<&str>) -> Result<crate::model::PublishedTable> {
        mydb::publish(&self.admin()?, ws, table, group, alias)
    }

    /// The file behind a download token, if it is the caller's and still
    /// kept.
    pub fn download(&self, ws: WsId, token: &str) -> Result<(PathBuf, TableFormat)> {
        let admin = self.admin()?;
        let f = admin.export_by_token(token)?;
        let job = admin.job(f.job_id)?;
        if job.user_id != ws {
            return Err(Error::NotOwner(job.job_id.0));
        }
        if f.purged || !f.path.exists() {
            return Err(Error::Gone);
        }
        Ok((f.path, job.format.unwrap_or(TableFormat::Csv)))
    }

    pub fn stats(&self) -> Result<Vec<QueryStat>> {
        self.admin()?.stats()
    }

    /// Jobs still in flight for `ws`, oldest first.
    pub fn active_jobs(&self, ws: WsId) -> Result<Vec<JobRecord>> {
        let mut v: Vec<JobRecord> = self
            .jobs(ws, &JobFilter::default())?
            .into_iter()
            .filter(|j| matches!(j.state, JobState::Ready | JobState::Started))
            .collect();
        v.reverse();
        Ok(v)
    }
}

/// True when the statement is a plain query (SELECT or WITH ... SELECT).
fn is_select(sql: &str) -> bool {
    let statements = executor::split_statements(sql);
    let Some(last) = statements.last() else { return false };
    tokenizer::tokenize(last)
        .iter()
        .find(|t| !t.is_trivia())
        .is_some_and(|t| t.is_word("select") || t.is_word("with") || t.is_word("values"))
}
