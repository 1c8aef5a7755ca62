use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex};

use super::{Departure, RiderId, RiderQuery, RiderSink, ScanWheel, SqliteBucketSource};
use crate::error::{Error, Result};

pub type RiderOutcome = Departure;

/// Counters for one wheel, readable while it runs.
#[derive(Debug, Default)]
pub struct WheelStats {
    pub bucket_reads: AtomicU64,
    pub riders_served: AtomicU64,
    pub riders_active: AtomicUsize,
}

impl WheelStats {
    /// Bucket reads per completed rider; 1.0 means no sharing happened.
    pub fn reads_per_rider(&self, n_buckets: usize) -> Option<f64> {
        let served = self.riders_served.load(Ordering::Relaxed);
        (served > 0).then(|| self.bucket_reads.load(Ordering::Relaxed) as f64 / (served as f64 * n_buckets as f64))
    }
}

enum Command {
    Admit {
        query: RiderQuery,
        sink: Box<dyn RiderSink>,
        admitted: Sender<Result<RiderId>>,
        done: Sender<RiderOutcome>,
    },
    Eject(RiderId),
}

/// Client side of a running wheel.
#[derive(Clone)]
pub struct WheelHandle {
    tx: Sender<Command>,
    pub stats: Arc<WheelStats>,
    pub n_buckets: usize,
}

impl WheelHandle {
    /// Starts a driver thread for `table` in the catalog at `catalog`. The
    /// thread idles (position frozen) while nobody rides and exits once
    /// every handle is dropped.
    pub fn spawn(catalog: &Path, context: &str, table: &str, n_buckets: usize) -> WheelHandle {
        let (tx, rx) = mpsc::channel();
        let stats = Arc::new(WheelStats::default());
        let wheel = ScanWheel::new(context, table, n_buckets);
        let (path, s) = (catalog.to_path_buf(), stats.clone());
        std::thread::Builder::new()
            .name(format!("wheel-{context}.{table}"))
            .spawn(move || drive(wheel, path, rx, s))
            .expect("spawn wheel thread");
        WheelHandle { tx, stats, n_buckets }
    }

    /// Boards `query`; the receiver yields the rider's departure.
    pub fn admit(&self, query: RiderQuery, sink: Box<dyn RiderSink>) -> Result<(RiderId, Receiver<RiderOutcome>)> {
        let (admitted, ack) = mpsc::channel();
        let (done, outcome) = mpsc::channel();
        self.tx
            .send(Command::Admit { query, sink, admitted, done })
            .map_err(|_| Error::Engine("wheel stopped".into()))?;
        let id = ack.recv().map_err(|_| Error::Engine("wheel stopped".into()))??;
        Ok((id, outcome))
    }

    /// Asks the wheel to drop a rider; its departure reports Canceled.
    pub fn eject(&self, id: RiderId) {
        let _ = self.tx.send(Command::Eject(id));
    }

    fn alive(&self) -> bool {
        // a send only fails once the driver has exited
        self.tx.send(Command::Eject(0)).is_ok()
    }
}

fn drive(mut wheel: ScanWheel, path: PathBuf, rx: Receiver<Command>, stats: Arc<WheelStats>) {
    let mut source: Option<SqliteBucketSource> = None;
    let mut waiting: HashMap<RiderId, Sender<RiderOutcome>> = HashMap::new();
    let mut closed = false;

    let depart = |d: Departure, waiting: &mut HashMap<RiderId, Sender<RiderOutcome>>| {
        if let Some(tx) = waiting.remove(&d.id) {
            let _ = tx.send(d);
        }
    };

    loop {
        let mut pending = Vec::new();
        if wheel.is_idle() {
            source = None;
            if closed {
                return;
            }
            match rx.recv() {
                Ok(c) => pending.push(c),
                Err(_) => return,
            }
        }
        loop {
            match rx.try_recv() {
                Ok(c) => pending.push(c),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    closed = true;
                    break;
                }
            }
        }
        // admissions between steps board at the current boundary
        for cmd in pending {
            match cmd {
                Command::Eject(id) => {
                    if let Some(d) = wheel.eject(id) {
                        depart(d, &mut waiting);
                    }
                }
                Command::Admit { query, sink, admitted, done } => {
                    let boarded = (|| {
                        wheel.check(&query)?;
                        if source.is_none() {
                            source = Some(SqliteBucketSource::open(&path, &wheel.table)?);
                        }
                        source.as_ref().unwrap().validate(&query)?;
                        wheel.admit(query, sink)
                    })();
                    if let Ok(id) = boarded {
                        waiting.insert(id, done);
                    }
                    let _ = admitted.send(boarded);
                }
            }
        }
        stats.riders_active.store(wheel.riders().len(), Ordering::Relaxed);
        let Some(src) = source.as_mut() else { continue };
        match wheel.step(src) {
            Ok(Some(rep)) => {
                stats.bucket_reads.fetch_add(1, Ordering::Relaxed);
                for d in rep.departures {
                    if d.result.is_ok() {
                        stats.riders_served.fetch_add(1, Ordering::Relaxed);
                    }
                    depart(d, &mut waiting);
                }
            }
            Ok(None) => {}
            Err(e) => {
                tracing::warn!(table = %wheel.table, error = %e, "bucket read failed; dropping riders");
                let ids: Vec<_> = wheel.riders().iter().map(|r| r.id).collect();
                for id in ids {
                    if let Some(mut d) = wheel.eject(id) {
                        d.result = Err(Error::Engine(e.to_string()));
                        depart(d, &mut waiting);
                    }
                }
                source = None;
            }
        }
        stats.riders_active.store(wheel.riders().len(), Ordering::Relaxed);
    }
}

/// One wheel per (target, context, table), started on first use.
pub struct WheelRegistry {
    n_buckets: usize,
    wheels: Mutex<HashMap<(i64, String, String), WheelHandle>>,
}

impl WheelRegistry {
    pub fn new(n_buckets: usize) -> Self {
        WheelRegistry { n_buckets, wheels: Mutex::new(HashMap::new()) }
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    pub fn wheel(&self, target_id: i64, catalog: &Path, context: &str, table: &str) -> WheelHandle {
        let key = (target_id, context.to_ascii_lowercase(), table.to_ascii_lowercase());
        let mut wheels = self.wheels.lock().unwrap();
        if let Some(h) = wheels.get(&key) {
            if h.alive() {
                return h.clone();
            }
        }
        let h = WheelHandle::spawn(catalog, context, table, self.n_buckets);
        wheels.insert(key, h.clone());
        h
    }

    /// (context, table, bucket reads, riders served) for every wheel.
    pub fn snapshot(&self) -> Vec<(String, String, u64, u64)> {
        let wheels = self.wheels.lock().unwrap();
        let mut out: Vec<_> = wheels
            .iter()
            .map(|((_, c, t), h)| {
                (
                    c.clone(),
                    t.clone(),
                    h.stats.bucket_reads.load(Ordering::Relaxed),
                    h.stats.riders_served.load(Ordering::Relaxed),
                )
            })
            .collect();
        out.sort();
        out
    }
}

impl Default for WheelRegistry {
    fn default() -> Self {
        WheelRegistry::new(super::DEFAULT_BUCKETS)
    }
}
