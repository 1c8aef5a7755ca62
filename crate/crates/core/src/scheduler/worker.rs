//! What a dispatched job does on its worker thread.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::mpsc::RecvTimeoutError;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rusqlite::Connection;

use crate::admin::{AdminDb, ExportFile};
use crate::engine::{self, Column, StopHandle};
use crate::error::{Error, Result};
use crate::executor::{self, AsyncOptions, RowBatch};
use crate::ferris::{parse_rider_query, RiderSink, WheelRegistry};
use crate::metrics::{thread_cpu_time, QueryStat};
use crate::model::{JobEvent, JobId, JobRecord, TableFormat, Timestamp};
use crate::mydb;
use crate::rewriter::top_to_limit;

pub const ROUTE_PRIVATE: &str = "private";
pub const ROUTE_WHEEL: &str = "wheel";

/// Shared, read-only inputs for every worker.
#[derive(Clone)]
pub(crate) struct WorkerEnv {
    pub admin_path: PathBuf,
    pub output_dir: PathBuf,
    pub chunk_size: usize,
    pub quota_bytes: Option<u64>,
    pub wheels: Option<Arc<WheelRegistry>>,
}

/// Runs a Query job to completion and records the terminal transition.
/// A transition that loses to the control loop (which may already have
/// failed or canceled the job) is ignored.
pub(crate) fn run_query_job(env: &WorkerEnv, job: &JobRecord, stop: &StopHandle) {
    let t0 = Instant::now();
    let cpu0 = thread_cpu_time();
    let admin = match AdminDb::open(&env.admin_path) {
        Ok(a) => a,
        Err(e) => {
            tracing::error!(job = job.job_id.0, error = %e, "worker cannot open admin db");
            return;
        }
    };
    let result = execute_query(env, &admin, job, stop);
    let rows = match &result {
        Ok(n) => *n,
        Err(_) => admin.job(job.job_id).map(|j| j.rows_out).unwrap_or(0),
    };
    let now = Timestamp::now();
    let _ = admin.record_stat(&QueryStat {
        job_id: job.job_id,
        elapsed_s: t0.elapsed().as_secs_f64(),
        rows,
        cpu_s: (thread_cpu_time().saturating_sub(cpu0)).as_secs_f64(),
        t_finished: now,
    });
    finish(&admin, job.job_id, result.map(|_| ()), now);
}

pub(crate) fn finish(admin: &AdminDb, id: JobId, result: Result<()>, now: Timestamp) {
    let outcome = match &result {
        Ok(()) => admin.transition(id, JobEvent::Complete, now, None),
        Err(Error::Canceled) => admin.transition(id, JobEvent::Cancel, now, Some("canceled")),
        Err(Error::QuantumExceeded) => admin.transition(id, JobEvent::Fail, now, Some("quantum exceeded")),
        Err(e) => admin.transition(id, JobEvent::Fail, now, Some(&e.to_string())),
    };
    match outcome {
        Ok(j) => tracing::info!(job = id.0, state = j.state.as_str(), "job finished"),
        Err(Error::StaleState(_)) | Err(Error::IllegalTransition { .. }) => {
            tracing::debug!(job = id.0, "job already settled by the control loop")
        }
        Err(e) => tracing::error!(job = id.0, error = %e, "cannot record job outcome"),
    }
}

fn execute_query(env: &WorkerEnv, admin: &AdminDb, job: &JobRecord, stop: &StopHandle) -> Result<i64> {
    let dest = executor::destination(admin, job)?;
    if let (Some(wheels), Some((path, table))) = (&env.wheels, &dest) {
        if let Some(n) = try_wheel(env, wheels, admin, job, path, table, stop)? {
            return Ok(n);
        }
    }
    admin.set_route(job.job_id, ROUTE_PRIVATE)?;
    let attachments = executor::attachments_for(admin, job)?;
    let conn = engine::open_execution(&attachments, stop)?;
    let sql = top_to_limit(&job.rewritten_text);
    let opts = AsyncOptions { chunk_size: env.chunk_size, quota_bytes: env.quota_bytes };
    let dest_ref = dest.as_ref().map(|(p, t)| (p.as_path(), t.as_str()));
    let mut progress = |n: i64| admin.set_rows_out(job.job_id, n);
    let n = executor::run_async(&conn, &sql, dest_ref, &opts, stop, &mut progress)?;
    admin.set_rows_out(job.job_id, n)?;
    if let Some((_, t)) = &dest {
        note_dest(admin, job, t);
    }
    Ok(n)
}

fn note_dest(admin: &AdminDb, job: &JobRecord, table: &str) {
    if let Ok(u) = admin.user(job.user_id) {
        if let Some(name) = u.mydb_name {
            let _ = admin.note_table(&name, table, Timestamp::now());
        }
    }
}

/// Rides the shared scan when the query qualifies. Returns None when the
/// job should take the private route instead.
fn try_wheel(
    env: &WorkerEnv,
    wheels: &WheelRegistry,
    admin: &AdminDb,
    job: &JobRecord,
    dest_path: &Path,
    dest_table: &str,
    stop: &StopHandle,
) -> Result<Option<i64>> {
    let Ok(query) = parse_rider_query(&job.rewritten_text) else {
        return Ok(None);
    };
    let Some(table) = query.table.clone() else {
        return Ok(None);
    };
    if query.qualifier.as_deref().is_some_and(|q| !q.eq_ignore_ascii_case(&job.context)) {
        return Ok(None);
    }
    let target = admin.target(job.target_id)?;
    let catalog = engine::context_path(&target, &job.context);
    if !catalog.exists() || !engine::table_exists(&engine::open_catalog(&catalog)?, "main", &table)? {
        return Ok(None);
    }

    let sink_conn = engine::open_mydb(dest_path)?;
    if engine::table_exists(&sink_conn, "main", dest_table)? {
        return Err(Error::TableExists(dest_table.to_string()));
    }
    let rows = Arc::new(AtomicI64::new(0));
    let sink = MyDbSink {
        conn: sink_conn,
        path: dest_path.to_path_buf(),
        table: dest_table.to_string(),
        columns: None,
        quota: env.quota_bytes,
        rows: rows.clone(),
    };
    let wheel = wheels.wheel(target.target_id.0, &catalog, &job.context, &table);
    let (id, done) = match wheel.admit(query, Box::new(sink)) {
        Ok(x) => x,
        Err(e) => {
            tracing::info!(job = job.job_id.0, error = %e, "wheel refused rider; using a private scan");
            return Ok(None);
        }
    };
    admin.set_route(job.job_id, ROUTE_WHEEL)?;
    let mut ejected = false;
    let departure = loop {
        match done.recv_timeout(Duration::from_millis(100)) {
            Ok(d) => break d,
            Err(RecvTimeoutError::Timeout) => {
                admin.set_rows_out(job.job_id, rows.load(Ordering::Relaxed))?;
                if !ejected && stop.poll().is_some() {
                    wheel.eject(id);
                    ejected = true;
                }
            }
            Err(RecvTimeoutError::Disconnected) => return Err(Error::Engine("wheel stopped".into())),
        }
    };
    let n = rows.load(Ordering::Relaxed);
    admin.set_rows_out(job.job_id, n)?;
    match departure.result {
        Ok(()) => {
            note_dest(admin, job, dest_table);
            Ok(Some(n))
        }
        Err(Error::Canceled) => Err(stop.explain(Error::Canceled)),
        Err(e) => Err(e),
    }
}

/// Appends a rider's matches to a MyDB table, creating it from the first
/// batch's columns.
struct MyDbSink {
    conn: Connection,
    path: PathBuf,
    table: String,
    columns: Option<Vec<Column>>,
    quota: Option<u64>,
    rows: Arc<AtomicI64>,
}

impl RiderSink for MyDbSink {
    fn accept(&mut self, batch: &RowBatch) -> Result<()> {
        let sink_err = |e: Error| Error::Sink(e.to_string());
        if self.columns.is_none() {
            engine::create_table(&self.conn, &self.table, &batch.columns).map_err(sink_err)?;
            self.columns = Some(batch.columns.clone());
        }
        engine::insert_rows(&self.conn, &self.table, batch.columns.len(), &batch.rows).map_err(sink_err)?;
        if let Some(q) = self.quota {
            if engine::database_bytes(&self.path) > q {
                return Err(Error::QuotaExceeded { quota: q });
            }
        }
        self.rows.fetch_add(batch.rows.len() as i64, Ordering::Relaxed);
        Ok(())
    }
}

/// Materializes an Export job's file and hands out its download token.
pub(crate) fn run_export_job(env: &WorkerEnv, job: &JobRecord, stop: &StopHandle) {
    let admin = match AdminDb::open(&env.admin_path) {
        Ok(a) => a,
        Err(e) => {
            tracing::error!(job = job.job_id.0, error = %e, "export worker cannot open admin db");
            return;
        }
    };
    let result = (|| -> Result<()> {
        let table = job.dest_table.as_deref().ok_or_else(|| Error::Invalid("export without a table".into()))?;
        let format = job.format.unwrap_or(TableFormat::Csv);
        std::fs::create_dir_all(&env.output_dir)?;
        let token = hex::encode(rand::random::<[u8; 16]>());
        let path = env.output_dir.join(format!("{token}.{}", format.extension()));
        let n = mydb::export_to_file(&admin, job.user_id, table, format, &path)?;
        if stop.check().is_err() {
            let _ = std::fs::remove_file(&path);
            return stop.check();
        }
        admin.set_rows_out(job.job_id, n)?;
        admin.insert_export(&ExportFile {
            token: token.clone(),
            job_id: job.job_id,
            path,
            created_at: Timestamp::now(),
            purged: false,
        })?;
        admin.set_output_url(job.job_id, &download_url(&token))?;
        Ok(())
    })();
    finish(&admin, job.job_id, result, Timestamp::now());
}

pub fn download_url(token: &str) -> String {
    format!("/v1/download/{token}")
}
