//! Per-query statistics and workload analysis: log-binned histograms,
//! power-law slope fits and CPU utilization.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{JobId, Timestamp};

pub const DEFAULT_BINS_PER_DECADE: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStat {
    pub job_id: JobId,
    pub elapsed_s: f64,
    pub rows: i64,
    pub cpu_s: f64,
    pub t_finished: Timestamp,
}

/// CPU time consumed so far by the calling thread.
pub fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: ts is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// One geometric bin `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub center: f64,
    pub count: u64,
}

fn edge(k: i64, per_decade: u32) -> f64 {
    10f64.powf(k as f64 / per_decade as f64)
}

/// Index of the bin holding `x`, corrected for rounding in `log10`.
fn bin_index(x: f64, per_decade: u32) -> i64 {
    let mut k = (x.log10() * per_decade as f64).floor() as i64;
    if edge(k + 1, per_decade) <= x {
        k += 1;
    } else if edge(k, per_decade) > x {
        k -= 1;
    }
    k
}

/// Histogram over contiguous geometric bins, `bins_per_decade` per factor of
/// ten, spanning the smallest through largest value. Empty interior bins are
/// included with count 0.
pub fn log_histogram(values: &[f64], bins_per_decade: u32) -> Result<Vec<Bin>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if bins_per_decade == 0 {
        return Err(Error::Invalid("bins_per_decade must be positive".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Invalid(format!("histogram values must be positive and finite, got {v}")));
    }
    let idx: Vec<i64> = values.iter().map(|&v| bin_index(v, bins_per_decade)).collect();
    let lo = *idx.iter().min().unwrap();
    let hi = *idx.iter().max().unwrap();
    let mut bins: Vec<Bin> = (lo..=hi)
        .map(|k| {
            let (a, b) = (edge(k, bins_per_decade), edge(k + 1, bins_per_decade));
            Bin { lo: a, hi: b, center: (a * b).sqrt(), count: 0 }
        })
        .collect();
    for k in idx {
        bins[(k - lo) as usize].count += 1;
    }
    Ok(bins)
}

/// Least-squares slope of log10(count) against log10(center) over the
/// nonempty bins.
pub fn powerlaw_slope(hist: &[Bin]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = hist
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.center.log10(), (b.count as f64).log10()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::DegenerateBins(pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// CPU-busy seconds per wall second within `[from, to)`.
///
/// Each query's CPU time is spread evenly over its run interval
/// `[t_finished - elapsed_s, t_finished]` and prorated by overlap with the
/// window.
pub fn utilization(stats: &[QueryStat], from: Timestamp, to: Timestamp) -> f64 {
    let window = to.secs_since(from);
    if window <= 0.0 {
        return 0.0;
    }
    let (w0, w1) = (from.0 as f64 / 1000.0, to.0 as f64 / 1000.0);
    let busy: f64 = stats
        .iter()
        .map(|s| {
            let end = s.t_finished.0 as f64 / 1000.0;
            let start = end - s.elapsed_s;
            if s.elapsed_s <= 0.0 {
                return if end >= w0 && end < w1 { s.cpu_s } else { 0.0 };
            }
            let overlap = (end.min(w1) - start.max(w0)).max(0.0);
            s.cpu_s * overlap / s.elapsed_s
        })
        .sum();
    busy / window
}

/// CSV rendering used by `casbatch-stats`.
pub fn histogram_csv(hist: &[Bin]) -> String {
    let mut out = String::from("lo,hi,center,count\n");
    for b in hist {
        out.push_str(&format!("{:?},{:?},{:?},{}\n", b.lo, b.hi, b.center, b.count));
    }
    out
}
