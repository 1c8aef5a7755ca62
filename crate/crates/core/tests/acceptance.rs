//! Acceptance suite: one line per criterion, PASS or FAIL, with the measured
//! numbers. Exits nonzero if any criterion fails.
//!
//! Run with `cargo test -p casbatch-core --test acceptance`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::Connection;

use casbatch_core::admin::AdminDb;
use casbatch_core::datagen::{self, CatalogSpec};
use casbatch_core::deploy;
use casbatch_core::engine::{self, Access, Attachment, Column, ColumnType, StopHandle, Value};
use casbatch_core::error::Error;
use casbatch_core::executor::{self, AsyncOptions, QuickLimits, QuickOutcome, RowSet};
use casbatch_core::ferris::{BucketSource, RiderQuery, ScanWheel, SqliteBucketSource, VecSink};
use casbatch_core::metrics;
use casbatch_core::model::{
    GroupRecord, JobRecord, JobState, PublishedTable, QueueMode, QueueSpec, TableFormat, TargetId, Timestamp,
    UserRecord, WsId,
};
use casbatch_core::mydb::{self, NeighborRequest};
use casbatch_core::rewriter::{default_rules, extract_into, resolve_aliases, screen::screen, Verdict};
use casbatch_core::scheduler::{Scheduler, SchedulerConfig};
use casbatch_core::service::{Service, SubmitRequest};

// ---------------------------------------------------------------------------
// heap accounting for the memory-ceiling criterion

struct CountingAlloc;

static HEAP_NOW: AtomicUsize = AtomicUsize::new(0);
static HEAP_PEAK: AtomicUsize = AtomicUsize::new(0);

fn note_alloc(n: usize) {
    let now = HEAP_NOW.fetch_add(n, Ordering::Relaxed) + n;
    HEAP_PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            note_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        HEAP_NOW.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            HEAP_NOW.fetch_sub(layout.size(), Ordering::Relaxed);
            note_alloc(new_size);
        }
        p
    }
}

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

// ---------------------------------------------------------------------------
// harness

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

trait Ctx<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> Ctx<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

fn main() {
    let criteria: &[(&str, f64, Check)] = &[
        ("queue-policy", 30.0, queue_policy),
        ("rewriter-golden", 1.0, rewriter_golden),
        ("streaming-materialization", 300.0, streaming_materialization),
        ("ferris-wheel", 60.0, ferris_wheel),
        ("cross-match", 30.0, cross_match),
        ("lifecycle", 60.0, lifecycle),
        ("import-export-round-trip", 30.0, round_trip),
        ("metrics-slope", 10.0, metrics_slope),
        ("portability-drill", 30.0, portability),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for &(name, budget_s, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let began = Instant::now();
        let res = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = began.elapsed().as_secs_f64();
        let res = match res {
            Ok(d) if secs > budget_s => Err(format!("{d}; took {secs:.1} s, budget {budget_s} s")),
            other => other,
        };
        match res {
            Ok(detail) => println!("PASS {name} ({secs:.2} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2} s): {detail}");
            }
        }
        std::io::stdout().flush().ok();
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// shared fixtures

const PW: &str = "acceptance";

struct Install {
    _dir: tempfile::TempDir,
    path: PathBuf,
    ws: WsId,
    target: TargetId,
}

fn install(rows: u64) -> Result<Install, String> {
    let dir = tempfile::tempdir().ctx("tempdir")?;
    let path = dir.path().to_path_buf();
    let (_, target, ws) = deploy::quickstart(&path, rows, 20_240_101, PW).ctx("quickstart")?;
    Ok(Install { _dir: dir, path, ws, target })
}

impl Install {
    fn admin(&self) -> AdminDb {
        AdminDb::open(&deploy::admin_path(&self.path)).unwrap()
    }

    fn service(&self) -> Service {
        Service::new(deploy::admin_path(&self.path))
    }

    fn scheduler_config(&self, poll_s: f64) -> SchedulerConfig {
        let mut cfg = SchedulerConfig::for_data_dir(&self.path);
        cfg.poll_interval_s = poll_s;
        cfg
    }
}

fn submit(svc: &Service, ws: WsId, query: &str, queue: Option<&str>, context: Option<&str>) -> Result<JobRecord, String> {
    svc.submit(
        ws,
        &SubmitRequest { query: query.into(), queue: queue.map(Into::into), context: context.map(Into::into) },
    )
    .ctx(query)
}

/// Polls the job until `done` holds or `limit` passes.
fn wait_for(svc: &Service, ws: WsId, job: &JobRecord, limit: Duration, done: impl Fn(&JobRecord) -> bool) -> Result<JobRecord, String> {
    let until = Instant::now() + limit;
    loop {
        let j = svc.job(ws, job.job_id).ctx("job")?;
        if done(&j) {
            return Ok(j);
        }
        if Instant::now() >= until {
            return Err(format!("job {} still {} after {limit:?}", j.job_id.0, j.state.as_str()));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

struct Background {
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl Background {
    fn scheduler(cfg: SchedulerConfig) -> Result<Self, String> {
        let mut sched = Scheduler::new(cfg).ctx("scheduler")?;
        let stop = Arc::new(AtomicBool::new(false));
        let s = stop.clone();
        let handle = std::thread::spawn(move || sched.run(&s));
        Ok(Background { stop, handle: Some(handle) })
    }
}

impl Drop for Background {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn read_table(conn: &Connection, sql: &str) -> Result<Vec<Vec<Value>>, String> {
    let mut stmt = conn.prepare(sql).ctx(sql)?;
    let n = stmt.column_count();
    let mut rows = stmt.query([]).ctx(sql)?;
    let mut out = Vec::new();
    while let Some(r) = rows.next().ctx(sql)? {
        out.push((0..n).map(|i| Value::from_ref(r.get_ref(i).unwrap())).collect());
    }
    Ok(out)
}

/// Canonical multiset form: rows rendered exactly, then sorted.
fn multiset(rows: &[Vec<Value>]) -> Vec<String> {
    let mut v: Vec<String> = rows.iter().map(|r| format!("{r:?}")).collect();
    v.sort_unstable();
    v
}

// ---------------------------------------------------------------------------
// queue policy

fn queue_policy() -> Result<String, String> {
    let inst = install(10_000)?;
    let admin = inst.admin();
    let quick = admin.queue("quick").ctx("quick queue")?;
    let long = admin.queue("long").ctx("long queue")?;
    ensure(quick.mode == QueueMode::Sync && quick.quantum_s == 60.0, || format!("quick queue {quick:?}"))?;
    ensure(quick.max_rows == Some(100_000), || format!("quick cap {:?}", quick.max_rows))?;
    ensure(long.mode == QueueMode::Async && long.quantum_s == 500.0 * 60.0, || format!("long queue {long:?}"))?;

    // the cap truncates at exactly 100,000 rows
    let svc = inst.service();
    let big = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c WHERE x < 150000) SELECT x FROM c";
    let q = svc.quick(inst.ws, big, None).ctx("quick 150k")?;
    ensure(q.truncated && q.rows.rows.len() == 100_000, || format!("truncated={} rows={}", q.truncated, q.rows.rows.len()))?;

    // scaled: a 3 s async queue; the quick queue must stay shortest
    let poll = 1.0;
    let scaled = 3.0;
    admin.put_queue(&QueueSpec { quantum_s: 0.5, ..QueueSpec::quick() }).ctx("scale quick")?;
    admin
        .put_queue(&QueueSpec { queue_id: "short".into(), quantum_s: scaled, mode: QueueMode::Async, max_rows: None })
        .ctx("short queue")?;
    let _sched = Background::scheduler(inst.scheduler_config(poll))?;
    // 10^4 rows at 10 ms each: far longer than the quantum
    let job = submit(&svc, inst.ws, "SELECT obj_id INTO MyDB.slow FROM galaxy WHERE sleep(0.01) >= 0", Some("short"), None)?;
    let started = wait_for(&svc, inst.ws, &job, Duration::from_secs(5), |j| j.t_started.is_some())?;
    let t0 = started.t_started.unwrap();
    let end = wait_for(&svc, inst.ws, &job, Duration::from_secs(15), |j| j.state.is_terminal())?;
    let observed = Timestamp::now().secs_since(t0);
    let bound = scaled + 2.0 * poll;
    ensure(end.state == JobState::Failed, || format!("job ended {} ({:?})", end.state.as_str(), end.error_msg))?;
    ensure(end.error_msg.as_deref().is_some_and(|m| m.contains("quantum")), || format!("error {:?}", end.error_msg))?;
    ensure(observed <= bound, || format!("killed after {observed:.2} s, bound {bound} s"))?;
    Ok(format!(
        "quick 60 s / 100000 rows, long 30000 s; scaled job ({}) killed {observed:.2} s after start (bound {bound} s)",
        end.exec_route.as_deref().unwrap_or("?")
    ))
}

// ---------------------------------------------------------------------------
// rewriter

enum Expect {
    Sql(&'static str, Option<&'static str>),
    Fails(fn(&Error) -> bool),
}

fn rewriter_golden() -> Result<String, String> {
    let user = UserRecord {
        ws_id: WsId(42),
        password_hash: String::new(),
        email: None,
        notify: false,
        mydb_name: Some("mydb_000042".into()),
        mydb_target: Some(TargetId(1)),
    };
    let groups = vec![GroupRecord { group_id: "collab1".into(), name: "c".into(), owner: WsId(7), members: vec![WsId(42)] }];
    let published = vec![PublishedTable {
        group_id: "collab1".into(),
        publisher: WsId(7),
        alias: "candidates".into(),
        mydb_name: "mydb_000007".into(),
        table: "candidates".into(),
        published_at: Timestamp(0),
    }];
    let contexts = vec!["SDSS_DR3".to_string()];
    use Expect::*;
    let cases: Vec<(&str, Expect)> = vec![
        (
            "SELECT TOP 10 * INTO MyDB.rgal FROM galaxy WHERE r < 22 AND r > 21",
            Sql("SELECT TOP 10 * FROM galaxy WHERE r < 22 AND r > 21", Some("rgal")),
        ),
        ("SELECT 1", Sql("SELECT 1", None)),
        ("SELECT * FROM MyDB.rgal", Sql("SELECT * FROM mydb_000042.rgal", None)),
        ("select * from mydb.RGal", Sql("select * from mydb_000042.RGal", None)),
        ("SELECT * FROM GROUP.collab1.candidates", Sql("SELECT * FROM mydb_000007.candidates", None)),
        ("SELECT 'MyDB.x' AS s", Sql("SELECT 'MyDB.x' AS s", None)),
        ("SELECT 'it''s MyDB.x' FROM MyDB.t", Sql("SELECT 'it''s MyDB.x' FROM mydb_000042.t", None)),
        ("SELECT 'a INTO MyDB.b' FROM t", Sql("SELECT 'a INTO MyDB.b' FROM t", None)),
        ("-- INTO MyDB.x\nSELECT a FROM t", Sql("-- INTO MyDB.x\nSELECT a FROM t", None)),
        ("/* MyDB.x */ SELECT a FROM t", Sql("/* MyDB.x */ SELECT a FROM t", None)),
        (
            "SELECT a INTO MyDB.b FROM t WHERE s = 'MyDB.c'",
            Sql("SELECT a FROM t WHERE s = 'MyDB.c'", Some("b")),
        ),
        ("SELECT a\nINTO MyDB.b\nFROM t", Sql("SELECT a\nFROM t", Some("b"))),
        (
            "SELECT g.ra, g.dec INTO MyDB.pairs FROM galaxy g JOIN MyDB.mine m ON g.obj_id = m.id",
            Sql("SELECT g.ra, g.dec FROM galaxy g JOIN mydb_000042.mine m ON g.obj_id = m.id", Some("pairs")),
        ),
        ("INSERT INTO MyDB.t SELECT * FROM galaxy", Sql("INSERT INTO mydb_000042.t SELECT * FROM galaxy", None)),
        (
            "SELECT r, COUNT(*) FROM galaxy GROUP BY r",
            Sql("SELECT r, COUNT(*) FROM galaxy GROUP BY r", None),
        ),
        (
            "SELECT * FROM MyDB.a JOIN GROUP.collab1.candidates c ON a.id = c.id",
            Sql("SELECT * FROM mydb_000042.a JOIN mydb_000007.candidates c ON a.id = c.id", None),
        ),
        (
            "SELECT \"MyDB.x\" FROM MyDB.y",
            Sql("SELECT \"MyDB.x\" FROM mydb_000042.y", None),
        ),
        ("SELECT a INTO staging.t FROM x", Fails(|e| matches!(e, Error::MalformedInto(_)))),
        ("SELECT * FROM GROUP.collab1.secret", Fails(|e| matches!(e, Error::NotPublished(_)))),
        ("SELECT * FROM GROUP.nogroup.t", Fails(|e| matches!(e, Error::UnknownGroup(_)))),
    ];
    for (input, expect) in &cases {
        let got = extract_into(input).and_then(|x| {
            resolve_aliases(&x.clean_sql, &user, &groups, &published, &contexts).map(|r| (r.clean_sql, x.dest))
        });
        match (expect, got) {
            (Sql(sql, dest), Ok((s, d))) => ensure(s == *sql && d.as_deref() == *dest, || {
                format!("{input:?} gave ({s:?}, {d:?}), expected ({sql:?}, {dest:?})")
            })?,
            (Fails(pred), Err(e)) => ensure(pred(&e), || format!("{input:?} failed with the wrong error: {e}"))?,
            (Sql(..), Err(e)) => return Err(format!("{input:?} failed: {e}")),
            (Fails(_), Ok(r)) => return Err(format!("{input:?} should fail, gave {r:?}")),
        }
    }

    let rules = default_rules();
    let rejects = |q: &str| matches!(screen(q, &rules), Verdict::Reject { .. });
    ensure(rejects("DROP TABLE Galaxy"), || "drop outside MyDB passed screening".into())?;
    ensure(rejects("EXEC sp_help"), || "system procedure passed screening".into())?;
    ensure(!rejects("DROP TABLE MyDB.scratch"), || "drop inside MyDB rejected".into())?;
    ensure(!rejects("SELECT 1"), || "plain query rejected".into())?;
    Ok(format!("{} golden cases; drop-outside-MyDB and system-procedure categories rejected", cases.len()))
}

// ---------------------------------------------------------------------------
// streaming

fn sqlite_highwater(reset: bool) -> i64 {
    unsafe { rusqlite::ffi::sqlite3_memory_highwater(reset as i32) }
}

fn streaming_materialization() -> Result<String, String> {
    const N: u64 = 1_000_000;
    const CEILING: usize = 64 << 20;
    let dir = tempfile::tempdir().ctx("tempdir")?;
    let catalog = dir.path().join("SDSS_DR3.db");
    datagen::write_catalog(CatalogSpec { n_rows: N, seed: 5 }, &catalog).ctx("catalog")?;
    let attach = vec![Attachment { schema: "SDSS_DR3".into(), path: catalog.clone(), access: Access::Catalog }];
    let dest = dir.path().join("mydb.db");

    // subcase: run_async dest equals the quick-path oracle as a multiset
    let sub = "SELECT obj_id, ra, dec, r, g FROM galaxy WHERE obj_id <= 10000 AND r < 24";
    let stop = StopHandle::new();
    let conn = engine::open_execution(&attach, &stop).ctx("open")?;
    let opts = AsyncOptions { chunk_size: 1000, quota_bytes: None };
    let n_sub = executor::run_async(&conn, sub, Some((&dest, "sub")), &opts, &stop, &mut |_| Ok(())).ctx("run_async sub")?;
    let oracle = match executor::run_quick(&conn, sub, QuickLimits { quantum: Duration::from_secs(60), max_rows: None }, &stop)
        .ctx("run_quick")?
    {
        QuickOutcome::Complete(rs) => rs.rows,
        QuickOutcome::Truncated(_) => return Err("uncapped oracle truncated".into()),
    };
    let sink = Connection::open(&dest).ctx("dest")?;
    let got = read_table(&sink, "SELECT * FROM sub")?;
    ensure(n_sub as usize == oracle.len() && multiset(&got) == multiset(&oracle), || {
        format!("subcase: {} rows in dest, oracle {}", got.len(), oracle.len())
    })?;
    drop(conn);

    // full run: 10^6 rows under the ceiling, progress sampled by another thread
    let progress = Arc::new(AtomicI64::new(0));
    let finished = Arc::new(AtomicBool::new(false));
    let sampler = {
        let (progress, finished) = (progress.clone(), finished.clone());
        std::thread::spawn(move || {
            let mut seen = Vec::new();
            while !finished.load(Ordering::SeqCst) {
                seen.push(progress.load(Ordering::SeqCst));
                std::thread::sleep(Duration::from_millis(2));
            }
            seen
        })
    };
    let heap_base = HEAP_NOW.load(Ordering::SeqCst);
    HEAP_PEAK.store(heap_base, Ordering::SeqCst);
    sqlite_highwater(true);
    let sql_base = unsafe { rusqlite::ffi::sqlite3_memory_used() };
    let total = {
        let stop = StopHandle::new();
        let conn = engine::open_execution(&attach, &stop).ctx("open")?;
        let p = progress.clone();
        executor::run_async(&conn, "SELECT * FROM galaxy", Some((&dest, "everything")), &opts, &stop, &mut |n| {
            p.store(n, Ordering::SeqCst);
            Ok(())
        })
        .ctx("run_async 10^6")?
    };
    finished.store(true, Ordering::SeqCst);
    let heap_peak = HEAP_PEAK.load(Ordering::SeqCst).saturating_sub(heap_base);
    let sql_peak = (sqlite_highwater(false) - sql_base).max(0) as usize;
    let seen = sampler.join().unwrap();
    let intermediate = seen.iter().filter(|&&n| n > 0 && n < N as i64).count();
    let in_dest: i64 = sink.query_row("SELECT COUNT(*) FROM everything", [], |r| r.get(0)).ctx("count")?;

    ensure(total == N as i64 && in_dest == N as i64, || format!("rows: returned {total}, in dest {in_dest}"))?;
    ensure(heap_peak + sql_peak < CEILING, || {
        format!("peak memory {} MiB over ceiling {} MiB", (heap_peak + sql_peak) >> 20, CEILING >> 20)
    })?;
    ensure(intermediate > 0, || "rows_out never observed strictly between 0 and the total".into())?;
    Ok(format!(
        "10^6 rows streamed; peak heap {:.1} MiB + engine {:.1} MiB < {} MiB; {intermediate} intermediate progress samples; 10^4 subcase ({n_sub} rows) equals oracle",
        heap_peak as f64 / 1048576.0,
        sql_peak as f64 / 1048576.0,
        CEILING >> 20
    ))
}

// ---------------------------------------------------------------------------
// ferris wheel

/// Bucket k holds the single row k.
struct OneRowBuckets {
    current: i64,
}

impl BucketSource for OneRowBuckets {
    fn load_bucket(&mut self, index: usize, _n: usize) -> casbatch_core::Result<u64> {
        self.current = index as i64;
        Ok(1)
    }

    fn evaluate(&mut self, _q: &RiderQuery) -> casbatch_core::Result<RowSet> {
        Ok(RowSet { columns: vec![Column::new("k", ColumnType::Integer)], rows: vec![vec![Value::Integer(self.current)]] })
    }
}

fn random_rider(rng: &mut ChaCha8Rng) -> String {
    const COLS: [&str; 6] = ["obj_id", "ra", "dec", "r", "g", "i"];
    let projection = if rng.random_bool(0.15) {
        "*".to_string()
    } else {
        let picked: Vec<&str> = COLS.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        if picked.is_empty() { "obj_id".to_string() } else { picked.join(", ") }
    };
    let mut preds = Vec::new();
    if rng.random_bool(0.6) {
        preds.push(format!("r < {:.3}", rng.random_range(14.0..26.0)));
    }
    if rng.random_bool(0.4) {
        let lo: f64 = rng.random_range(-90.0..60.0);
        preds.push(format!("dec BETWEEN {lo:.3} AND {:.3}", lo + rng.random_range(1.0..60.0)));
    }
    if rng.random_bool(0.3) {
        preds.push(format!("g - r > {:.2}", rng.random_range(-3.0..3.0)));
    }
    if rng.random_bool(0.2) {
        preds.push(format!("obj_id % {} = 0", rng.random_range(2..50)));
    }
    let mut sql = format!("SELECT {projection} FROM galaxy");
    if !preds.is_empty() {
        sql.push_str(" WHERE ");
        sql.push_str(&preds.join(" AND "));
    }
    sql
}

fn ferris_wheel() -> Result<String, String> {
    // hand case: B = 4, riders boarding at steps 0, 1, 2
    let mut w = ScanWheel::new("C", "t", 4);
    let mut src = OneRowBuckets { current: 0 };
    let mut steps = 0;
    for _ in 0..3 {
        w.admit_sql("SELECT k FROM t", Box::new(VecSink::default())).ctx("admit")?;
        w.step(&mut src).ctx("step")?;
        steps += 1;
    }
    while w.step(&mut src).ctx("step")?.is_some() {
        steps += 1;
    }
    ensure(steps == 6, || format!("hand case took {steps} steps, expected 6"))?;

    const B: usize = 64;
    const RIDERS: usize = 200;
    let dir = tempfile::tempdir().ctx("tempdir")?;
    let catalog = dir.path().join("SDSS_DR3.db");
    datagen::write_catalog(CatalogSpec { n_rows: 20_000, seed: 3 }, &catalog).ctx("catalog")?;
    let mut source = SqliteBucketSource::open(&catalog, "galaxy").ctx("bucket source")?;
    let mut wheel = ScanWheel::new("SDSS_DR3", "galaxy", B);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut riders = Vec::new();
    let mut departures = Vec::new();
    let mut boarding = BTreeSet::new();
    while riders.len() < RIDERS {
        for _ in 0..rng.random_range(0..=3usize) {
            if riders.len() == RIDERS {
                break;
            }
            let sql = random_rider(&mut rng);
            let sink = Arc::new(Mutex::new(VecSink::default()));
            let id = wheel.admit_sql(&sql, Box::new(sink.clone())).ctx(&sql)?;
            boarding.insert(wheel.position());
            riders.push((id, sql, sink));
        }
        if let Some(rep) = wheel.step(&mut source).ctx("step")? {
            departures.extend(rep.departures);
        }
    }
    while let Some(rep) = wheel.step(&mut source).ctx("step")? {
        departures.extend(rep.departures);
    }
    ensure(departures.len() == RIDERS, || format!("{} of {RIDERS} riders departed", departures.len()))?;
    if let Some(d) = departures.iter().find(|d| d.result.is_err() || d.trace.len() != B) {
        return Err(format!("rider {} left after {} buckets: {:?}", d.id, d.trace.len(), d.result));
    }

    let oracle = Connection::open(&catalog).ctx("oracle")?;
    for (_, sql, sink) in &riders {
        let want = read_table(&oracle, sql)?;
        let got: Vec<Vec<Value>> = sink.lock().unwrap().batches.iter().flat_map(|b| b.rows.iter().cloned()).collect();
        ensure(multiset(&got) == multiset(&want), || format!("{sql}: wheel {} rows, standalone {}", got.len(), want.len()))?;
    }
    let standalone = (RIDERS * B) as u64;
    let reads = wheel.bucket_reads();
    ensure(reads < standalone, || format!("bucket reads {reads} not below standalone total {standalone}"))?;
    Ok(format!(
        "hand case 6 steps; {RIDERS} riders over B={B} boarding at {} positions match standalone scans; {reads} bucket reads vs {standalone} standalone",
        boarding.len()
    ))
}

// ---------------------------------------------------------------------------
// cross-match

fn haversine_arcmin(ra1: f64, dec1: f64, ra2: f64, dec2: f64) -> f64 {
    let (p1, p2) = (dec1.to_radians(), dec2.to_radians());
    let h = ((p2 - p1) / 2.0).sin().powi(2) + p1.cos() * p2.cos() * ((ra2 - ra1).to_radians() / 2.0).sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin().to_degrees() * 60.0
}

fn write_star_catalog(path: &Path, stars: &[(i64, f64, f64)]) -> Result<(), String> {
    let mut c = Connection::open(path).ctx("catalog")?;
    c.execute_batch("CREATE TABLE stars (obj_id INTEGER PRIMARY KEY, ra REAL NOT NULL, dec REAL NOT NULL)").ctx("create")?;
    let tx = c.transaction().ctx("tx")?;
    {
        let mut ins = tx.prepare("INSERT INTO stars VALUES (?1, ?2, ?3)").ctx("prepare")?;
        for s in stars {
            ins.execute(rusqlite::params![s.0, s.1, s.2]).ctx("insert")?;
        }
    }
    tx.commit().ctx("commit")
}

fn add_context(inst: &Install, name: &str, stars: &[(i64, f64, f64)]) -> Result<(), String> {
    let mut admin = inst.admin();
    admin.add_context(inst.target, name).ctx("add_context")?;
    let t = admin.target(inst.target).ctx("target")?;
    write_star_catalog(&engine::context_path(&t, name), stars)
}

fn upload_points(svc: &Service, ws: WsId, table: &str, pts: &[(i64, f64, f64)]) -> Result<(), String> {
    let mut csv = String::from("id,ra,dec\n");
    for p in pts {
        csv.push_str(&format!("{},{:?},{:?}\n", p.0, p.1, p.2));
    }
    svc.import(ws, table, TableFormat::Csv, csv.as_bytes()).ctx("import").map(|_| ())
}

fn wrap(ra: f64) -> f64 {
    let r = ra.rem_euclid(360.0);
    if r >= 360.0 { 0.0 } else { r }
}

fn cross_match() -> Result<String, String> {
    const RADIUS: f64 = 0.5; // 30 arcsec
    let inst = install(100)?;
    let svc = inst.service();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut stars = Vec::with_capacity(10_000);
    for k in 0..10_000i64 {
        let (ra, dec) = if k < 300 {
            // a strip straddling ra = 0
            (wrap(rng.random_range(-0.02..0.02)), rng.random_range(-0.5..0.5))
        } else {
            (rng.random_range(0.0..360.0), (2.0 * rng.random::<f64>() - 1.0).asin().to_degrees())
        };
        stars.push((k + 1, ra, dec));
    }
    add_context(&inst, "XCAT", &stars)?;

    let mut pts = Vec::with_capacity(1000);
    for k in 0..1000i64 {
        let (ra, dec) = if k < 900 {
            // near a catalog object, within about 1 arcmin
            let s = if k < 300 { stars[rng.random_range(0..300)] } else { stars[rng.random_range(300..10_000)] };
            let off = rng.random_range(0.0..1.0) / 60.0;
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let dec = (s.2 + off * th.sin()).clamp(-89.9, 89.9);
            (wrap(s.1 + off * th.cos() / dec.to_radians().cos()), dec)
        } else {
            (rng.random_range(0.0..360.0), rng.random_range(-60.0..60.0))
        };
        pts.push((k + 1, ra, dec));
    }
    upload_points(&svc, inst.ws, "pts", &pts)?;
    let info = svc.neighbors(inst.ws, &NeighborRequest::new("pts", "XCAT", "stars", RADIUS)).ctx("neighbors")?;

    let h = mydb::existing(&inst.admin(), inst.ws).ctx("mydb")?.ok_or("no MyDB")?;
    let conn = h.open().ctx("open mydb")?;
    let rows = read_table(&conn, &format!("SELECT my_id, match_id, dist_arcmin FROM {}", info.name))?;
    let got: BTreeSet<(i64, i64)> = rows
        .iter()
        .map(|r| match (&r[0], &r[1]) {
            (Value::Integer(a), Value::Integer(b)) => (*a, *b),
            other => panic!("unexpected ids {other:?}"),
        })
        .collect();

    let mut want = BTreeSet::new();
    let mut wrapped = 0;
    for p in &pts {
        for s in &stars {
            if haversine_arcmin(p.1, p.2, s.1, s.2) <= RADIUS {
                want.insert((p.0, s.0));
                if (p.1 - s.1).abs() > 180.0 {
                    wrapped += 1;
                }
            }
        }
    }
    ensure(rows.len() == got.len(), || "duplicate pairs reported".into())?;
    ensure(got == want, || {
        format!(
            "{} pairs vs oracle {}; missing {:?}; extra {:?}",
            got.len(),
            want.len(),
            want.difference(&got).take(5).collect::<Vec<_>>(),
            got.difference(&want).take(5).collect::<Vec<_>>()
        )
    })?;
    ensure(wrapped > 0, || "no pair crosses ra = 0; the wraparound case is untested".into())?;

    // a known separation
    add_context(&inst, "PAIRCAT", &[(1, 10.0, 0.5)])?;
    upload_points(&svc, inst.ws, "origin", &[(1, 10.0, 0.0)])?;
    svc.neighbors(inst.ws, &NeighborRequest::new("origin", "PAIRCAT", "stars", 31.0)).ctx("neighbors pair")?;
    let d: f64 = conn.query_row("SELECT dist_arcmin FROM origin_neighbors", [], |r| r.get(0)).ctx("pair")?;
    ensure(((d - 30.0) / 30.0).abs() <= 1e-9, || format!("(10,0)-(10,0.5) reported {d} arcmin"))?;
    Ok(format!(
        "1000 x 10^4 at 30\": {} pairs equal the all-pairs oracle, {wrapped} across ra=0; (10,0)-(10,0.5) = {d} arcmin",
        got.len()
    ))
}

// ---------------------------------------------------------------------------
// lifecycle

fn poll_until(sched: &mut Scheduler, svc: &Service, ws: WsId, job: &JobRecord, done: impl Fn(&JobRecord) -> bool) -> Result<JobRecord, String> {
    let until = Instant::now() + Duration::from_secs(20);
    loop {
        sched.poll_once(Timestamp::now()).ctx("poll")?;
        let j = svc.job(ws, job.job_id).ctx("job")?;
        if done(&j) {
            return Ok(j);
        }
        if Instant::now() >= until {
            return Err(format!("job {} stuck in {}", j.job_id.0, j.state.as_str()));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn lifecycle() -> Result<String, String> {
    const RETENTION: f64 = 10.0;
    let inst = install(10_000)?;
    let svc = inst.service();
    let ws = inst.ws;
    let mut cfg = inst.scheduler_config(1.0);
    cfg.retention_s = RETENTION;
    let mut sched = Scheduler::new(cfg).ctx("scheduler")?;

    // submit -> Started -> Finished
    let job = submit(&svc, ws, "SELECT TOP 10 * INTO MyDB.rgal FROM galaxy WHERE r < 22 AND r > 21", None, None)?;
    ensure(job.state == JobState::Ready, || format!("new job is {}", job.state.as_str()))?;
    let done = poll_until(&mut sched, &svc, ws, &job, |j| j.state.is_terminal())?;
    ensure(done.state == JobState::Finished, || format!("job ended {} {:?}", done.state.as_str(), done.error_msg))?;
    let (ts, tf) = (done.t_started.ok_or("never started")?, done.t_finished.ok_or("no finish time")?);
    ensure(job.t_submitted <= ts && ts <= tf, || "timestamps out of order".into())?;
    let h = mydb::existing(&inst.admin(), ws).ctx("mydb")?.ok_or("no MyDB")?;
    let rgal = read_table(&h.open().ctx("open")?, "SELECT r FROM rgal")?;
    ensure(!rgal.is_empty() && rgal.len() <= 10, || format!("rgal has {} rows", rgal.len()))?;
    ensure(rgal.iter().all(|r| r[0].as_f64().is_some_and(|v| v > 21.0 && v < 22.0)), || "rgal row outside 21 < r < 22".into())?;

    // cancel from Ready
    let ready = submit(&svc, ws, "SELECT obj_id INTO MyDB.never FROM galaxy", None, None)?;
    let c = svc.cancel(ws, ready.job_id).ctx("cancel ready")?;
    ensure(c.state == JobState::Canceled && c.t_started.is_none(), || format!("Ready cancel left {}", c.state.as_str()))?;

    // cancel from Started
    let slow = submit(&svc, ws, "SELECT obj_id INTO MyDB.slow FROM galaxy WHERE sleep(0.01) >= 0", None, None)?;
    poll_until(&mut sched, &svc, ws, &slow, |j| j.state == JobState::Started)?;
    svc.cancel(ws, slow.job_id).ctx("cancel started")?;
    let slow = poll_until(&mut sched, &svc, ws, &slow, |j| j.state.is_terminal())?;
    ensure(slow.state == JobState::Canceled, || format!("Started cancel ended {}", slow.state.as_str()))?;

    // resubmit clones
    let clone = svc.resubmit(ws, ready.job_id).ctx("resubmit")?;
    ensure(
        clone.job_id != ready.job_id && clone.query_text == ready.query_text && clone.state == JobState::Ready,
        || format!("clone {clone:?}"),
    )?;
    svc.cancel(ws, clone.job_id).ctx("cancel clone")?;

    // export -> token -> Gone after retention
    let exp = svc.export(ws, "rgal", TableFormat::Csv).ctx("export")?;
    let exp = poll_until(&mut sched, &svc, ws, &exp, |j| j.state.is_terminal())?;
    ensure(exp.state == JobState::Finished, || format!("export ended {} {:?}", exp.state.as_str(), exp.error_msg))?;
    let url = exp.output_url.clone().ok_or("export has no output URL")?;
    let token = url.rsplit('/').next().unwrap().to_string();
    let (file, _) = svc.download(ws, &token).ctx("download")?;
    let lines = std::fs::read_to_string(&file).ctx("read export")?.lines().count();
    ensure(lines == rgal.len() + 1, || format!("export has {lines} lines for {} rows", rgal.len()))?;

    let finished = exp.t_finished.unwrap();
    while Timestamp::now().secs_since(finished) <= RETENTION {
        std::thread::sleep(Duration::from_millis(100));
    }
    let report = sched.poll_once(Timestamp::now()).ctx("purge poll")?;
    ensure(report.purged.contains(&token), || format!("purge report {report:?}"))?;
    ensure(matches!(svc.download(ws, &token), Err(Error::Gone)), || "token still downloadable after retention".into())?;
    ensure(!file.exists(), || "export file still on disk".into())?;
    sched.drain();
    Ok(format!(
        "Ready->Started->Finished ({} rows), Ready and Started cancels, resubmit clone, export token Gone after {RETENTION} s",
        done.rows_out
    ))
}

// ---------------------------------------------------------------------------
// import/export round trip

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const POOL: &[char] = &['a', 'Z', ' ', ',', '"', '\'', '\n', '<', '>', '&', ';', 'é', '✓', '\t', '0', '9', '.', '-'];
    let mut s = String::from("t");
    for _ in 0..rng.random_range(0..12) {
        s.push(POOL[rng.random_range(0..POOL.len())]);
    }
    s
}

fn random_float(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(-1e6..1e6),
        1 => rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-300..300)),
        2 => rng.random_range(-1000..1000) as f64,
        _ => rng.random::<f64>(),
    }
}

fn same_value(ty: ColumnType, a: &Value, b: &Value) -> bool {
    match (ty, a, b) {
        (ColumnType::Float, Value::Float(x), Value::Float(y)) => x == y || ((x - y) / x).abs() <= 1e-15,
        _ => a == b,
    }
}

fn round_trip() -> Result<String, String> {
    let inst = install(10)?;
    let admin = inst.admin();
    let h = mydb::ensure_mydb(&admin, inst.ws).ctx("mydb")?;
    let conn = h.open().ctx("open")?;
    let dir = tempfile::tempdir().ctx("tempdir")?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0usize;
    for t in 0..20 {
        let n_cols = rng.random_range(1..6);
        let types: Vec<ColumnType> = (0..n_cols)
            .map(|_| [ColumnType::Integer, ColumnType::Float, ColumnType::Text][rng.random_range(0..3)])
            .collect();
        let columns: Vec<Column> = types.iter().enumerate().map(|(i, ty)| Column::new(format!("c{i}_{}", ty.as_str()), *ty)).collect();
        let n_rows = rng.random_range(1..300);
        let rows: Vec<Vec<Value>> = (0..n_rows)
            .map(|r| {
                types
                    .iter()
                    .map(|ty| {
                        // first row fully populated so every column has a typed sample
                        if r > 0 && rng.random_bool(0.1) {
                            return Value::Null;
                        }
                        match ty {
                            ColumnType::Integer => Value::Integer(rng.random()),
                            ColumnType::Float => Value::Float(random_float(&mut rng)),
                            _ => Value::Text(random_text(&mut rng)),
                        }
                    })
                    .collect()
            })
            .collect();
        let name = format!("orig{t}");
        engine::create_table(&conn, &name, &columns).ctx("create")?;
        engine::insert_rows(&conn, &name, n_cols, &rows).ctx("insert")?;
        admin.note_table(&h.name, &name, Timestamp::now()).ctx("note")?;

        for format in [TableFormat::Csv, TableFormat::VoTable] {
            let file = dir.path().join(format!("{name}.{}", format.extension()));
            mydb::export_to_file(&admin, inst.ws, &name, format, &file).ctx("export")?;
            let copy = format!("{name}_{}", format.as_str());
            let input = std::io::BufReader::new(std::fs::File::open(&file).ctx("open export")?);
            mydb::import_table(&admin, inst.ws, input, format, &copy, u64::MAX).ctx("import")?;
            let back = read_table(&conn, &format!("SELECT * FROM {copy} ORDER BY rowid"))?;
            ensure(back.len() == rows.len(), || format!("{copy}: {} rows back of {}", back.len(), rows.len()))?;
            for (i, (a, b)) in rows.iter().zip(&back).enumerate() {
                for (c, ty) in types.iter().enumerate() {
                    ensure(same_value(*ty, &a[c], &b[c]), || {
                        format!("{copy} row {i} col {c} ({}): wrote {:?}, read {:?}", ty.as_str(), a[c], b[c])
                    })?;
                }
            }
            checked += rows.len();
        }
    }
    Ok(format!("20 random tables, {checked} rows through CSV and VOTable with values intact"))
}

// ---------------------------------------------------------------------------
// metrics

fn metrics_slope() -> Result<String, String> {
    let stats = datagen::synthetic_workload(100_000, 13);
    let elapsed: Vec<f64> = stats.iter().map(|s| s.elapsed_s).collect();
    let hist = metrics::log_histogram(&elapsed, 4).ctx("histogram")?;
    let slope = metrics::powerlaw_slope(&hist).ctx("slope")?;
    ensure((slope + 1.0).abs() <= 0.1, || format!("slope {slope:.3}"))?;
    Ok(format!("slope {slope:.3} over {} log bins", hist.len()))
}

// ---------------------------------------------------------------------------
// portability

fn portability() -> Result<String, String> {
    let inst = install(1000)?;
    let svc = inst.service();
    let _sched = Background::scheduler(inst.scheduler_config(1.0))?;

    // a job on the original target runs
    let first = submit(&svc, inst.ws, "SELECT obj_id INTO MyDB.before FROM galaxy WHERE r < 15", None, None)?;
    wait_for(&svc, inst.ws, &first, Duration::from_secs(10), |j| j.state.is_terminal())?;

    // a second target with a fresh context, registered while the scheduler runs
    let mut admin = inst.admin();
    let t2 = deploy::add_target(&mut admin, &inst.path, "t2", &[], 2, false).ctx("add_target")?;
    datagen::generate(&mut admin, "t2", "FRESH_DR1", CatalogSpec { n_rows: 5000, seed: 8 }).ctx("generate")?;
    let began = Instant::now();
    let job = submit(&svc, inst.ws, "SELECT obj_id, r INTO MyDB.fresh FROM galaxy WHERE r < 15", None, Some("FRESH_DR1"))?;
    let done = wait_for(&svc, inst.ws, &job, Duration::from_secs(15), |j| j.state.is_terminal())?;
    ensure(done.state == JobState::Finished, || format!("job ended {} {:?}", done.state.as_str(), done.error_msg))?;
    ensure(done.target_id == t2, || format!("ran on target {}, expected {}", done.target_id.0, t2.0))?;
    let want = datagen::rows(CatalogSpec { n_rows: 5000, seed: 8 }).filter(|r| r.r < 15.0).count() as i64;
    ensure(done.rows_out == want, || format!("rows_out {} expected {want}", done.rows_out))?;
    Ok(format!("target t2 registered at runtime; job finished on it in {:.2} s with {want} rows", began.elapsed().as_secs_f64()))
}
