//! Deterministic synthetic sky catalogs.
//!
//! Every row draws from its own ChaCha stream (`seed`, stream = row index),
//! so any row range can be generated independently and the output depends
//! only on `(n_rows, seed)`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::{params, Connection};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::admin::AdminDb;
use crate::engine;
use crate::error::{Error, Result};
use crate::metrics::QueryStat;
use crate::model::{JobId, Timestamp};

pub const DEFAULT_CONTEXT: &str = "SDSS_DR3";
pub const TABLE: &str = "galaxy";

const MAG_MIN: f64 = 14.0;
const MAG_MAX: f64 = 26.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogSpec {
    pub n_rows: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GalaxyRow {
    pub obj_id: i64,
    pub ra: f64,
    pub dec: f64,
    pub r: f64,
    pub g: f64,
    pub i: f64,
}

/// Row `index` (0-based) of the catalog for `seed`.
pub fn row(seed: u64, index: u64) -> GalaxyRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let ra = 360.0 * rng.random::<f64>();
    // uniform on the sphere: sin(dec) uniform on [-1, 1)
    let dec = (2.0 * rng.random::<f64>() - 1.0).asin().to_degrees();
    let mut mag = || MAG_MIN + (MAG_MAX - MAG_MIN) * rng.random::<f64>();
    GalaxyRow { obj_id: index as i64 + 1, ra, dec, r: mag(), g: mag(), i: mag() }
}

pub fn rows(spec: CatalogSpec) -> impl Iterator<Item = GalaxyRow> {
    (0..spec.n_rows).map(move |k| row(spec.seed, k))
}

/// SHA-256 over the little-endian bytes of every row, hex encoded.
pub fn checksum(spec: CatalogSpec) -> String {
    let mut h = Sha256::new();
    for r in rows(spec) {
        h.update(r.obj_id.to_le_bytes());
        for v in [r.ra, r.dec, r.r, r.g, r.i] {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Writes the catalog database to `path`, replacing any existing file.
/// The file appears atomically once complete.
pub fn write_catalog(spec: CatalogSpec, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let _ = std::fs::remove_file(&tmp);
    {
        let mut conn = Connection::open(&tmp)?;
        conn.execute_batch(
            "PRAGMA journal_mode = OFF;
             PRAGMA synchronous = OFF;
             CREATE TABLE galaxy (
                 obj_id INTEGER PRIMARY KEY,
                 ra     REAL NOT NULL,
                 dec    REAL NOT NULL,
                 r      REAL NOT NULL,
                 g      REAL NOT NULL,
                 i      REAL NOT NULL
             );",
        )?;
        let tx = conn.transaction()?;
        {
            let mut stmt = tx.prepare("INSERT INTO galaxy VALUES (?1, ?2, ?3, ?4, ?5, ?6)")?;
            for r in rows(spec) {
                stmt.execute(params![r.obj_id, r.ra, r.dec, r.r, r.g, r.i])?;
            }
        }
        tx.commit()?;
        conn.execute_batch("CREATE INDEX galaxy_dec ON galaxy (dec);")?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Generates a catalog context on a registered target, adding the context
/// to the target's list if it is new.
pub fn generate(admin: &mut AdminDb, target_name: &str, context: &str, spec: CatalogSpec) -> Result<PathBuf> {
    let target = admin.target_by_name(target_name)?;
    if !Path::new(&target.locator).is_dir() {
        return Err(Error::TargetUnavailable(target.locator));
    }
    if !target.serves_context(context) {
        admin.add_context(target.target_id, context)?;
    }
    let path = engine::context_path(&target, context);
    write_catalog(spec, &path)?;
    tracing::info!(target = %target.name, context, rows = spec.n_rows, "catalog generated");
    Ok(path)
}

/// `n` draws from the density p(x) ∝ x^(-alpha) on [xmin, xmax], alpha ≠ 1.
pub fn power_law_samples(n: usize, alpha: f64, xmin: f64, xmax: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = 1.0 - alpha;
    let (a, b) = (xmin.powf(e), xmax.powf(e));
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            (a + u * (b - a)).powf(1.0 / e)
        })
        .collect()
}

/// A synthetic query log whose elapsed times follow p(t) ∝ t^-2 on
/// [1 s, 10^4 s], so log-binned frequency falls as 1/size.
pub fn synthetic_workload(n: usize, seed: u64) -> Vec<QueryStat> {
    let times = power_law_samples(n, 2.0, 1.0, 1e4, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut end = 0i64;
    times
        .into_iter()
        .enumerate()
        .map(|(k, t)| {
            end += (t * 1000.0) as i64;
            QueryStat {
                job_id: JobId(k as i64 + 1),
                elapsed_s: t,
                rows: (t * 100.0 * rng.random::<f64>()) as i64,
                cpu_s: t * rng.random::<f64>(),
                t_finished: Timestamp(end),
            }
        })
        .collect()
}
