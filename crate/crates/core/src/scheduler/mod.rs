//! The job poller: dispatch, quantum enforcement, cancellation, the export
//! slot, output retention and notifications.
//!
//! The jobs table is the only coordination point. Workers record their own
//! terminal transition; the control loop may get there first (timeout,
//! cancel), in which case the worker's compare-and-set simply loses.
//!
//! Only one scheduler may run against an admin database at a time.

mod worker;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::admin::AdminDb;
use crate::engine::{StopHandle, StopReason};
use crate::error::{Error, Result};
use crate::ferris::{WheelRegistry, DEFAULT_BUCKETS};
use crate::model::{JobEvent, JobId, JobKind, JobRecord, JobState, QueueMode, TargetId, Timestamp, UserRecord, WsId};

pub use worker::{download_url, ROUTE_PRIVATE, ROUTE_WHEEL};

pub const DEFAULT_POLL_INTERVAL_S: f64 = 5.0;
pub const DEFAULT_RETENTION_S: f64 = 604_800.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub poll_interval_s: f64,
    pub retention_s: f64,
    pub output_dir: PathBuf,
    pub admin_db: PathBuf,
    pub chunk_size: usize,
    pub quota_bytes: Option<u64>,
    /// Route eligible long-queue scans through shared wheels.
    pub use_wheel: bool,
    pub wheel_buckets: usize,
}

impl SchedulerConfig {
    /// Defaults for a data directory holding `admin.db` and `exports/`.
    pub fn for_data_dir(dir: &std::path::Path) -> Self {
        SchedulerConfig {
            poll_interval_s: DEFAULT_POLL_INTERVAL_S,
            retention_s: DEFAULT_RETENTION_S,
            output_dir: dir.join("exports"),
            admin_db: dir.join("admin.db"),
            chunk_size: crate::executor::DEFAULT_CHUNK_SIZE,
            quota_bytes: Some(crate::mydb::DEFAULT_QUOTA_BYTES),
            use_wheel: true,
            wheel_buckets: DEFAULT_BUCKETS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.poll_interval_s >= 1.0) {
            return Err(Error::Invalid("poll_interval_s must be at least 1".into()));
        }
        if !(self.retention_s > 0.0) {
            return Err(Error::Invalid("retention_s must be positive".into()));
        }
        if self.chunk_size == 0 || self.wheel_buckets == 0 {
            return Err(Error::Invalid("chunk_size and wheel_buckets must be positive".into()));
        }
        Ok(())
    }

    pub fn poll_interval(&self) -> Duration {
        Duration::from_secs_f64(self.poll_interval_s)
    }
}

/// Side effect fired once per terminal job for users who asked for it.
pub trait Notifier: Send {
    fn notify(&self, user: &UserRecord, job: &JobRecord);
}

/// Writes a log line instead of sending mail.
#[derive(Debug, Default)]
pub struct LogNotifier;

impl Notifier for LogNotifier {
    fn notify(&self, user: &UserRecord, job: &JobRecord) {
        tracing::info!(
            user = user.ws_id.0,
            email = user.email.as_deref().unwrap_or(""),
            job = job.job_id.0,
            state = job.state.as_str(),
            "job notification"
        );
    }
}

/// What one poll did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DispatchReport {
    pub started: Vec<JobId>,
    pub timed_out: Vec<JobId>,
    pub canceled: Vec<JobId>,
    pub orphaned: Vec<JobId>,
    pub exported: Vec<JobId>,
    /// Download tokens whose files were removed.
    pub purged: Vec<String>,
    pub notified: Vec<JobId>,
}

struct Worker {
    target: TargetId,
    stop: StopHandle,
    handle: JoinHandle<()>,
}

/// Running-job gauge per target, with the peak ever seen.
#[derive(Debug, Default)]
pub struct Gauge {
    inner: Mutex<HashMap<TargetId, (usize, usize)>>,
}

impl Gauge {
    fn enter(&self, t: TargetId) {
        let mut m = self.inner.lock().unwrap();
        let e = m.entry(t).or_default();
        e.0 += 1;
        e.1 = e.1.max(e.0);
    }

    fn leave(&self, t: TargetId) {
        if let Some(e) = self.inner.lock().unwrap().get_mut(&t) {
            e.0 -= 1;
        }
    }

    pub fn current(&self, t: TargetId) -> usize {
        self.inner.lock().unwrap().get(&t).map_or(0, |e| e.0)
    }

    pub fn peak(&self, t: TargetId) -> usize {
        self.inner.lock().unwrap().get(&t).map_or(0, |e| e.1)
    }
}

pub struct Scheduler {
    admin: AdminDb,
    cfg: SchedulerConfig,
    env: worker::WorkerEnv,
    running: HashMap<JobId, Worker>,
    export: Option<(JobId, Worker)>,
    notifier: Box<dyn Notifier>,
    gauge: Arc<Gauge>,
    wheels: Option<Arc<WheelRegistry>>,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Result<Self> {
        cfg.validate()?;
        let admin = AdminDb::open(&cfg.admin_db)?;
        admin.init()?;
        let wheels = cfg.use_wheel.then(|| Arc::new(WheelRegistry::new(cfg.wheel_buckets)));
        let env = worker::WorkerEnv {
            admin_path: cfg.admin_db.clone(),
            output_dir: cfg.output_dir.clone(),
            chunk_size: cfg.chunk_size,
            quota_bytes: cfg.quota_bytes,
            wheels: wheels.clone(),
        };
        Ok(Scheduler {
            admin,
            cfg,
            env,
            running: HashMap::new(),
            export: None,
            notifier: Box::new(LogNotifier),
            gauge: Arc::new(Gauge::default()),
            wheels,
        })
    }

    pub fn with_notifier(mut self, n: Box<dyn Notifier>) -> Self {
        self.notifier = n;
        self
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn admin(&self) -> &AdminDb {
        &self.admin
    }

    pub fn gauge(&self) -> Arc<Gauge> {
        self.gauge.clone()
    }

    pub fn wheels(&self) -> Option<Arc<WheelRegistry>> {
        self.wheels.clone()
    }

    /// Jobs with a live worker in this process.
    pub fn running(&self) -> Vec<JobId> {
        let mut v: Vec<JobId> = self.running.keys().copied().collect();
        v.extend(self.export.as_ref().map(|(id, _)| *id));
        v.sort();
        v
    }

    /// One scan of the jobs table. Per-job problems are logged and the poll
    /// carries on.
    pub fn poll_once(&mut self, now: Timestamp) -> Result<DispatchReport> {
        let mut report = DispatchReport::default();
        self.reap();
        self.sweep_cancels(now, &mut report)?;
        self.sweep_timeouts(now, &mut report)?;
        self.sweep_orphans(now, &mut report)?;
        self.dispatch(now, &mut report)?;
        self.dispatch_export(now, &mut report)?;
        self.purge(now, &mut report)?;
        self.notify(&mut report)?;
        Ok(report)
    }

    fn reap(&mut self) {
        let done: Vec<JobId> = self.running.iter().filter(|(_, w)| w.handle.is_finished()).map(|(id, _)| *id).collect();
        for id in done {
            if let Some(w) = self.running.remove(&id) {
                if w.handle.join().is_err() {
                    tracing::error!(job = id.0, "worker panicked");
                }
            }
        }
        if self.export.as_ref().is_some_and(|(_, w)| w.handle.is_finished()) {
            let (id, w) = self.export.take().unwrap();
            if w.handle.join().is_err() {
                tracing::error!(job = id.0, "export worker panicked");
            }
        }
    }

    fn worker_stop(&self, id: JobId) -> Option<&StopHandle> {
        self.running
            .get(&id)
            .map(|w| &w.stop)
            .or_else(|| self.export.as_ref().filter(|(e, _)| *e == id).map(|(_, w)| &w.stop))
    }

    fn settle(&self, id: JobId, event: JobEvent, now: Timestamp, note: &str) -> bool {
        match self.admin.transition(id, event, now, Some(note)) {
            Ok(_) => true,
            Err(Error::StaleState(_)) | Err(Error::IllegalTransition { .. }) => false,
            Err(e) => {
                tracing::warn!(job = id.0, error = %e, "transition failed");
                false
            }
        }
    }

    fn sweep_cancels(&mut self, now: Timestamp, report: &mut DispatchReport) -> Result<()> {
        for state in [JobState::Ready, JobState::Started] {
            for job in self.admin.jobs_in_state(state, None, None)? {
                if !job.cancel_requested {
                    continue;
                }
                if let Some(s) = self.worker_stop(job.job_id) {
                    s.stop(StopReason::Canceled);
                }
                if self.settle(job.job_id, JobEvent::Cancel, now, "canceled") {
                    report.canceled.push(job.job_id);
                }
            }
        }
        Ok(())
    }

    fn sweep_timeouts(&mut self, now: Timestamp, report: &mut DispatchReport) -> Result<()> {
        let quanta: HashMap<String, f64> =
            self.admin.queues()?.into_iter().map(|q| (q.queue_id, q.quantum_s)).collect();
        for job in self.admin.jobs_in_state(JobState::Started, None, None)? {
            let (Some(q), Some(t0)) = (quanta.get(&job.queue_id), job.t_started) else {
                continue;
            };
            if now.secs_since(t0) > *q {
                if let Some(s) = self.worker_stop(job.job_id) {
                    s.stop(StopReason::Timeout);
                }
                if self.settle(job.job_id, JobEvent::Fail, now, "quantum exceeded") {
                    report.timed_out.push(job.job_id);
                }
            }
        }
        Ok(())
    }

    /// Jobs this process would have run, Started but with no worker here,
    /// were left behind by a crash.
    fn sweep_orphans(&mut self, now: Timestamp, report: &mut DispatchReport) -> Result<()> {
        let modes = self.queue_modes()?;
        for job in self.admin.jobs_in_state(JobState::Started, None, None)? {
            if !owned_by_scheduler(&job, &modes) || self.worker_stop(job.job_id).is_some() {
                continue;
            }
            if self.settle(job.job_id, JobEvent::Fail, now, "orphaned") {
                report.orphaned.push(job.job_id);
            }
        }
        Ok(())
    }

    fn queue_modes(&self) -> Result<HashMap<String, QueueMode>> {
        Ok(self.admin.queues()?.into_iter().map(|q| (q.queue_id, q.mode)).collect())
    }

    fn dispatch(&mut self, now: Timestamp, report: &mut DispatchReport) -> Result<()> {
        let modes = self.queue_modes()?;
        for target in self.admin.targets()? {
            let live = self.running.values().filter(|w| w.target == target.target_id).count();
            let mut free = (target.max_concurrent as usize).saturating_sub(live);
            if free == 0 {
                continue;
            }
            for job in self.admin.jobs_in_state(JobState::Ready, Some(target.target_id), Some(JobKind::Query))? {
                if free == 0 {
                    break;
                }
                if modes.get(&job.queue_id) != Some(&QueueMode::Async) || job.cancel_requested {
                    continue;
                }
                let started = match self.admin.transition(job.job_id, JobEvent::Start, now, None) {
                    Ok(j) => j,
                    Err(Error::StaleState(_)) | Err(Error::IllegalTransition { .. }) => continue,
                    Err(e) => return Err(e),
                };
                let quantum = Duration::from_secs_f64(self.admin.queue(&job.queue_id)?.quantum_s);
                let stop = StopHandle::with_deadline(quantum);
                let (env, gauge, s) = (self.env.clone(), self.gauge.clone(), stop.clone());
                let tid = target.target_id;
                let handle = std::thread::Builder::new()
                    .name(format!("job-{}", job.job_id.0))
                    .spawn(move || {
                        gauge.enter(tid);
                        worker::run_query_job(&env, &started, &s);
                        gauge.leave(tid);
                    })?;
                self.running.insert(job.job_id, Worker { target: tid, stop, handle });
                report.started.push(job.job_id);
                free -= 1;
            }
        }
        Ok(())
    }

    fn dispatch_export(&mut self, now: Timestamp, report: &mut DispatchReport) -> Result<()> {
        if self.export.is_some() {
            return Ok(());
        }
        for job in self.admin.jobs_in_state(JobState::Ready, None, Some(JobKind::Export))? {
            if job.cancel_requested {
                continue;
            }
            let started = match self.admin.transition(job.job_id, JobEvent::Start, now, None) {
                Ok(j) => j,
                Err(Error::StaleState(_)) | Err(Error::IllegalTransition { .. }) => continue,
                Err(e) => return Err(e),
            };
            let stop = StopHandle::new();
            let (env, s) = (self.env.clone(), stop.clone());
            let handle = std::thread::Builder::new()
                .name(format!("export-{}", job.job_id.0))
                .spawn(move || worker::run_export_job(&env, &started, &s))?;
            self.export = Some((job.job_id, Worker { target: job.target_id, stop, handle }));
            report.exported.push(job.job_id);
            break;
        }
        Ok(())
    }

    fn purge(&mut self, now: Timestamp, report: &mut DispatchReport) -> Result<()> {
        for f in self.admin.exports()? {
            if f.purged || now.secs_since(f.created_at) <= self.cfg.retention_s {
                continue;
            }
            match std::fs::remove_file(&f.path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => {
                    tracing::warn!(path = %f.path.display(), error = %e, "cannot remove expired export");
                    continue;
                }
            }
            self.admin.mark_export_purged(&f.token)?;
            report.purged.push(f.token);
        }
        Ok(())
    }

    fn notify(&mut self, report: &mut DispatchReport) -> Result<()> {
        for job in self.admin.unnotified_terminal()? {
            match self.admin.user(job.user_id) {
                Ok(u) if u.notify => {
                    self.notifier.notify(&u, &job);
                    report.notified.push(job.job_id);
                }
                _ => {}
            }
            self.admin.mark_notified(job.job_id)?;
        }
        Ok(())
    }

    /// Stops every worker as Canceled and waits for them.
    pub fn drain(&mut self) {
        let now = Timestamp::now();
        let mut workers: Vec<(JobId, Worker)> = self.running.drain().collect();
        workers.extend(self.export.take());
        for (_, w) in &workers {
            w.stop.stop(StopReason::Canceled);
        }
        for (id, w) in workers {
            let _ = w.handle.join();
            // the worker normally records this itself
            self.settle(id, JobEvent::Cancel, now, "canceled");
        }
    }

    /// Polls every interval until `shutdown` is set, then drains.
    pub fn run(&mut self, shutdown: &AtomicBool) {
        let tick = Duration::from_millis(50);
        while !shutdown.load(Ordering::SeqCst) {
            let began = Instant::now();
            match self.poll_once(Timestamp::now()) {
                Ok(r) if r != DispatchReport::default() => tracing::debug!(?r, "poll"),
                Ok(_) => {}
                Err(e) => tracing::warn!(error = %e, "poll failed"),
            }
            while began.elapsed() < self.cfg.poll_interval() && !shutdown.load(Ordering::SeqCst) {
                std::thread::sleep(tick);
            }
        }
        self.drain();
    }
}

fn owned_by_scheduler(job: &JobRecord, modes: &HashMap<String, QueueMode>) -> bool {
    match job.job_kind {
        JobKind::Export => true,
        JobKind::Query => modes.get(&job.queue_id) == Some(&QueueMode::Async),
        JobKind::Import => false,
    }
}

/// Cancels a job on its owner's behalf. A Ready job is canceled at once; a
/// Started one is flagged for the next poll. Repeating the call is harmless.
pub fn request_cancel(admin: &AdminDb, id: JobId, user: WsId, now: Timestamp) -> Result<JobRecord> {
    let job = admin.job(id)?;
    if job.user_id != user {
        return Err(Error::NotOwner(id.0));
    }
    match job.state {
        JobState::Canceled => return Ok(job),
        s if s.is_terminal() => return Err(Error::AlreadyTerminal(id.0)),
        _ => {}
    }
    admin.set_cancel_requested(id)?;
    if job.state == JobState::Ready {
        match admin.transition(id, JobEvent::Cancel, now, Some("canceled")) {
            Ok(j) => return Ok(j),
            Err(Error::StaleState(_)) => {}
            Err(e) => return Err(e),
        }
    }
    admin.job(id)
}
