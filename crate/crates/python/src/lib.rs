//! Python bindings: installation setup, an authenticated session over the
//! service layer, and an in-process scheduler.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! dicts and lists.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use casbatch_core::admin::JobFilter;
use casbatch_core::datagen::{self, CatalogSpec};
use casbatch_core::deploy;
use casbatch_core::ferris;
use casbatch_core::model::{JobId, JobKind, JobState, TableFormat, Timestamp, WsId};
use casbatch_core::mydb::xmatch::{separation_deg, SkyPosition};
use casbatch_core::mydb::NeighborRequest;
use casbatch_core::scheduler::{Scheduler as CoreScheduler, SchedulerConfig};
use casbatch_core::service::{Service, SubmitRequest};

create_exception!(casbatch, CasbatchError, PyException);

fn err(e: casbatch_core::Error) -> PyErr {
    CasbatchError::new_err((e.kind(), e.to_string()))
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| CasbatchError::new_err(("Serialize", e.to_string())))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn format_arg(s: &str) -> PyResult<TableFormat> {
    TableFormat::parse(s).map_err(err)
}

/// A data directory: admin database, exports and server targets.
#[pyclass(module = "casbatch")]
struct Installation {
    data: PathBuf,
}

#[pymethods]
impl Installation {
    #[new]
    fn new(data_dir: PathBuf) -> PyResult<Self> {
        deploy::init(&data_dir).map_err(err)?;
        Ok(Installation { data: data_dir })
    }

    /// Sets up one target with a generated catalog and one user; returns
    /// the installation and the new user's workspace id.
    #[staticmethod]
    #[pyo3(signature = (data_dir, rows=10_000, seed=1, password="secret"))]
    fn quickstart(py: Python<'_>, data_dir: PathBuf, rows: u64, seed: u64, password: &str) -> PyResult<(Self, i64)> {
        let pw = password.to_string();
        let dir = data_dir.clone();
        let (_, _, ws) = py.detach(move || deploy::quickstart(&dir, rows, seed, &pw)).map_err(err)?;
        Ok((Installation { data: data_dir }, ws.0))
    }

    #[getter]
    fn data_dir(&self) -> PathBuf {
        self.data.clone()
    }

    #[getter]
    fn admin_db(&self) -> PathBuf {
        deploy::admin_path(&self.data)
    }

    #[pyo3(signature = (name, contexts=Vec::new(), max_concurrent=2, hosts_mydb=false))]
    fn add_target(&self, name: &str, contexts: Vec<String>, max_concurrent: u32, hosts_mydb: bool) -> PyResult<i64> {
        let mut admin = deploy::init(&self.data).map_err(err)?;
        let ctx: Vec<&str> = contexts.iter().map(String::as_str).collect();
        let id = deploy::add_target(&mut admin, &self.data, name, &ctx, max_concurrent, hosts_mydb).map_err(err)?;
        Ok(id.0)
    }

    #[pyo3(signature = (password, email=None, notify=false))]
    fn create_user(&self, password: &str, email: Option<&str>, notify: bool) -> PyResult<i64> {
        let admin = deploy::init(&self.data).map_err(err)?;
        Ok(admin.create_user(password, email, notify).map_err(err)?.0)
    }

    /// Writes a synthetic catalog context onto a target; returns its checksum.
    #[pyo3(signature = (target, rows, seed=1, context=datagen::DEFAULT_CONTEXT))]
    fn generate(&self, py: Python<'_>, target: &str, rows: u64, seed: u64, context: &str) -> PyResult<String> {
        let (data, target, context) = (self.data.clone(), target.to_string(), context.to_string());
        py.detach(move || {
            let spec = CatalogSpec { n_rows: rows, seed };
            let mut admin = deploy::init(&data)?;
            datagen::generate(&mut admin, &target, &context, spec)?;
            Ok(datagen::checksum(spec))
        })
        .map_err(err)
    }

    fn targets<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let admin = deploy::init(&self.data).map_err(err)?;
        to_py(py, &admin.targets().map_err(err)?)
    }

    /// Opens an authenticated session.
    fn session(&self, ws_id: i64, password: &str) -> PyResult<Session> {
        Session::new(self.data.clone(), ws_id, password)
    }

    /// An in-process scheduler over this installation.
    #[pyo3(signature = (poll_interval_s=1.0, use_wheel=true))]
    fn scheduler(&self, poll_interval_s: f64, use_wheel: bool) -> PyResult<Scheduler> {
        Scheduler::new(self.data.clone(), poll_interval_s, use_wheel)
    }
}

/// One user's view of the service.
#[pyclass(module = "casbatch")]
struct Session {
    svc: Service,
    ws: WsId,
}

#[pymethods]
impl Session {
    #[new]
    fn new(data_dir: PathBuf, ws_id: i64, password: &str) -> PyResult<Self> {
        let svc = Service::new(deploy::admin_path(&data_dir));
        let user = svc.authenticate(ws_id, password).map_err(err)?;
        Ok(Session { svc, ws: user.ws_id })
    }

    #[getter]
    fn ws_id(&self) -> i64 {
        self.ws.0
    }

    #[pyo3(signature = (query, queue=None, context=None))]
    fn submit<'py>(
        &self,
        py: Python<'py>,
        query: &str,
        queue: Option<String>,
        context: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let req = SubmitRequest { query: query.to_string(), queue, context };
        let (svc, ws) = (self.svc.clone(), self.ws);
        let job = py.detach(move || svc.submit(ws, &req)).map_err(err)?;
        to_py(py, &job)
    }

    fn job<'py>(&self, py: Python<'py>, job_id: i64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.svc.job(self.ws, JobId(job_id)).map_err(err)?)
    }

    #[pyo3(signature = (state=None, kind=None))]
    fn jobs<'py>(&self, py: Python<'py>, state: Option<&str>, kind: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let filter = JobFilter {
            state: state.map(JobState::parse).transpose().map_err(err)?,
            kind: kind.map(JobKind::parse).transpose().map_err(err)?,
            since: None,
            until: None,
        };
        to_py(py, &self.svc.jobs(self.ws, &filter).map_err(err)?)
    }

    fn cancel<'py>(&self, py: Python<'py>, job_id: i64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.svc.cancel(self.ws, JobId(job_id)).map_err(err)?)
    }

    fn resubmit<'py>(&self, py: Python<'py>, job_id: i64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.svc.resubmit(self.ws, JobId(job_id)).map_err(err)?)
    }

    /// Runs `query` in the quick queue; returns `{job_id, columns, rows, truncated}`.
    #[pyo3(signature = (query, context=None))]
    fn quick<'py>(&self, py: Python<'py>, query: &str, context: Option<String>) -> PyResult<Bound<'py, PyAny>> {
        let (svc, ws, q) = (self.svc.clone(), self.ws, query.to_string());
        let res = py.detach(move || svc.quick(ws, &q, context.as_deref())).map_err(err)?;
        to_py(py, &res)
    }

    fn tables<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.svc.tables(self.ws).map_err(err)?)
    }

    fn drop_table(&self, table: &str) -> PyResult<()> {
        self.svc.drop_table(self.ws, table).map_err(err)
    }

    /// Imports CSV or VOTable text into a new MyDB table.
    #[pyo3(signature = (table, data, format="csv"))]
    fn import_table<'py>(&self, py: Python<'py>, table: &str, data: &str, format: &str) -> PyResult<Bound<'py, PyAny>> {
        let info = self.svc.import(self.ws, table, format_arg(format)?, data.as_bytes()).map_err(err)?;
        to_py(py, &info)
    }

    /// Queues an export job; a running scheduler writes the file.
    #[pyo3(signature = (table, format="csv"))]
    fn export<'py>(&self, py: Python<'py>, table: &str, format: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.svc.export(self.ws, table, format_arg(format)?).map_err(err)?)
    }

    /// Path of a finished export, given the token at the end of its output URL.
    fn download(&self, token: &str) -> PyResult<PathBuf> {
        Ok(self.svc.download(self.ws, token).map_err(err)?.0)
    }

    #[pyo3(signature = (my_table, context, target_table, radius_arcmin, ra_column="ra", dec_column="dec"))]
    #[allow(clippy::too_many_arguments)]
    fn neighbors<'py>(
        &self,
        py: Python<'py>,
        my_table: &str,
        context: &str,
        target_table: &str,
        radius_arcmin: f64,
        ra_column: &str,
        dec_column: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let req = NeighborRequest {
            my_table: my_table.into(),
            context: context.into(),
            target_table: target_table.into(),
            radius_arcmin,
            ra_column: ra_column.into(),
            dec_column: dec_column.into(),
            my_id_column: None,
            match_id_column: None,
        };
        let (svc, ws) = (self.svc.clone(), self.ws);
        let info = py.detach(move || svc.neighbors(ws, &req)).map_err(err)?;
        to_py(py, &info)
    }

    /// Polls until the job is terminal or `timeout_s` passes.
    #[pyo3(signature = (job_id, timeout_s=60.0))]
    fn wait<'py>(&self, py: Python<'py>, job_id: i64, timeout_s: f64) -> PyResult<Bound<'py, PyAny>> {
        let (svc, ws) = (self.svc.clone(), self.ws);
        let job = py
            .detach(move || {
                let deadline = Instant::now() + Duration::from_secs_f64(timeout_s);
                loop {
                    let j = svc.job(ws, JobId(job_id))?;
                    if j.state.is_terminal() || Instant::now() >= deadline {
                        return Ok(j);
                    }
                    std::thread::sleep(Duration::from_millis(50));
                }
            })
            .map_err(err)?;
        to_py(py, &job)
    }
}

/// The batch scheduler, driven from Python one poll at a time or in a
/// background thread.
#[pyclass(module = "casbatch", unsendable)]
struct Scheduler {
    inner: Option<CoreScheduler>,
}

#[pymethods]
impl Scheduler {
    #[new]
    #[pyo3(signature = (data_dir, poll_interval_s=1.0, use_wheel=true))]
    fn new(data_dir: PathBuf, poll_interval_s: f64, use_wheel: bool) -> PyResult<Self> {
        let mut cfg = SchedulerConfig::for_data_dir(&data_dir);
        cfg.poll_interval_s = poll_interval_s;
        cfg.use_wheel = use_wheel;
        Ok(Scheduler { inner: Some(CoreScheduler::new(cfg).map_err(err)?) })
    }

    /// One pass: sweeps, dispatch, exports, purge and notification.
    fn poll<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.as_mut().ok_or_else(|| CasbatchError::new_err(("Invalid", "scheduler drained")))?;
        to_py(py, &s.poll_once(Timestamp::now()).map_err(err)?)
    }

    /// Polls every `interval_s` until nothing is running or Ready, or the
    /// timeout passes. Returns the number of polls.
    #[pyo3(signature = (timeout_s=60.0, interval_s=0.05))]
    fn run_until_idle(&mut self, timeout_s: f64, interval_s: f64) -> PyResult<u32> {
        let s = self.inner.as_mut().ok_or_else(|| CasbatchError::new_err(("Invalid", "scheduler drained")))?;
        let deadline = Instant::now() + Duration::from_secs_f64(timeout_s);
        let mut polls = 0;
        loop {
            s.poll_once(Timestamp::now()).map_err(err)?;
            polls += 1;
            let ready = s.admin().jobs_in_state(JobState::Ready, None, None).map_err(err)?;
            if (s.running().is_empty() && ready.is_empty()) || Instant::now() >= deadline {
                return Ok(polls);
            }
            std::thread::sleep(Duration::from_secs_f64(interval_s));
        }
    }

    /// Cancels running workers and stops.
    fn drain(&mut self) {
        if let Some(mut s) = self.inner.take() {
            s.drain();
        }
    }
}

/// Great-circle separation in arcminutes.
#[pyfunction]
fn separation_arcmin(ra1: f64, dec1: f64, ra2: f64, dec2: f64) -> PyResult<f64> {
    let a = SkyPosition::new(ra1, dec1).map_err(err)?;
    let b = SkyPosition::new(ra2, dec2).map_err(err)?;
    Ok(separation_deg(a, b) * 60.0)
}

/// Whether a query can ride the shared scan, and its table if so.
#[pyfunction]
fn rider_table(query: &str) -> Option<String> {
    ferris::parse_rider_query(query).ok().and_then(|q| q.table)
}

#[pymodule]
fn casbatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CasbatchError", m.py().get_type::<CasbatchError>())?;
    m.add_class::<Installation>()?;
    m.add_class::<Session>()?;
    m.add_class::<Scheduler>()?;
    m.add_function(wrap_pyfunction!(separation_arcmin, m)?)?;
    m.add_function(wrap_pyfunction!(rider_table, m)?)?;
    Ok(())
}
