//! Shared circular scans ("Ferris wheel").
//!
//! A wheel walks the B buckets of one catalog table in a loop. Riders are
//! filter/projection queries over that table; each boards at the next bucket
//! boundary and leaves after seeing every bucket exactly once, so concurrent
//! riders share each bucket read.

mod driver;
mod sqlite;

pub use driver::{RiderOutcome, WheelHandle, WheelRegistry, WheelStats};
pub use sqlite::SqliteBucketSource;

use crate::error::{Error, Result};
use crate::executor::RowBatch;
use crate::rewriter::tokenizer::{tokenize, Token, TokenKind};

pub const DEFAULT_BUCKETS: usize = 64;

pub type RiderId = u64;

/// A single-table filter/projection, as text fragments of the original
/// query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RiderQuery {
    /// Select list, verbatim.
    pub projection: String,
    /// Table named in FROM, if the query has one.
    pub table: Option<String>,
    /// Qualifier before the table name (`SDSS_DR3.galaxy`).
    pub qualifier: Option<String>,
    pub alias: Option<String>,
    /// WHERE condition, verbatim.
    pub predicate: Option<String>,
}

impl RiderQuery {
    /// Top-level items of the select list.
    pub fn projection_list(&self) -> Vec<String> {
        let tokens = tokenize(&self.projection);
        let mut out = Vec::new();
        let mut depth = 0;
        let mut start = 0;
        for t in &tokens {
            if t.is_punct('(') {
                depth += 1;
            } else if t.is_punct(')') {
                depth -= 1;
            } else if depth == 0 && t.is_punct(',') {
                out.push(self.projection[start..t.start].trim().to_string());
                start = t.end();
            }
        }
        out.push(self.projection[start..].trim().to_string());
        out
    }

    /// The query against `table` (which may be schema-qualified).
    pub fn sql_against(&self, table: &str) -> String {
        let mut sql = format!("SELECT {} FROM {table}", self.projection);
        if let Some(a) = &self.alias {
            sql.push(' ');
            sql.push_str(a);
        }
        if let Some(p) = &self.predicate {
            sql.push_str(" WHERE ");
            sql.push_str(p);
        }
        sql
    }
}

const BARRED_WORDS: &[&str] = &[
    "join", "group", "having", "order", "limit", "top", "distinct", "union", "intersect", "except", "with",
    "window", "over", "into", "offset",
];
const AGGREGATES: &[&str] = &["count", "sum", "avg", "min", "max", "total", "group_concat", "string_agg"];

/// Parses `SELECT <list> [FROM [q.]table [[AS] alias]] [WHERE <cond>]`,
/// refusing anything a shared scan cannot serve: joins, subqueries,
/// aggregates, grouping, ordering, limits, DISTINCT and set operations.
pub fn parse_rider_query(sql: &str) -> Result<RiderQuery> {
    let tokens = tokenize(sql);
    let ineligible = |why: &str| Error::Ineligible(why.to_string());
    let sig: Vec<usize> = (0..tokens.len()).filter(|&i| !tokens[i].is_trivia()).collect();
    let mut sig = sig.as_slice();
    while let Some((&last, rest)) = sig.split_last() {
        if tokens[last].is_punct(';') {
            sig = rest;
        } else {
            break;
        }
    }
    if sig.is_empty() || !tokens[sig[0]].is_word("select") {
        return Err(ineligible("not a SELECT"));
    }
    for (n, &i) in sig.iter().enumerate() {
        let t = &tokens[i];
        if n > 0 && t.is_word("select") {
            return Err(ineligible("subqueries are not supported"));
        }
        if t.kind == TokenKind::Word {
            let w = t.text.to_ascii_lowercase();
            if BARRED_WORDS.contains(&w.as_str()) {
                return Err(Error::Ineligible(format!("{} is not supported", w.to_uppercase())));
            }
            let called = sig.get(n + 1).is_some_and(|&j| tokens[j].is_punct('('));
            if called && AGGREGATES.contains(&w.as_str()) {
                return Err(ineligible("aggregates are not supported"));
            }
        }
        if t.is_punct(';') {
            return Err(ineligible("multiple statements"));
        }
    }

    let pos = |word: &str| sig.iter().position(|&i| tokens[i].is_word(word));
    let from_at = pos("from");
    let where_at = pos("where");
    if let (Some(f), Some(w)) = (from_at, where_at) {
        if w < f {
            return Err(ineligible("WHERE before FROM"));
        }
    }
    let proj_end = from_at.or(where_at).map(|n| tokens[sig[n]].start).unwrap_or(sql.len());
    let projection = sql[tokens[sig[0]].end()..proj_end].trim().to_string();
    if projection.is_empty() {
        return Err(ineligible("empty select list"));
    }

    let (mut table, mut qualifier, mut alias) = (None, None, None);
    if let Some(f) = from_at {
        let src_end = where_at.unwrap_or(sig.len());
        let src: Vec<&Token<'_>> = sig[f + 1..src_end].iter().map(|&i| &tokens[i]).collect();
        let name = |t: &Token<'_>| t.ident().ok_or_else(|| ineligible("FROM must name a table"));
        let k = match src.as_slice() {
            [a, dot, b, ..] if dot.is_punct('.') => {
                qualifier = Some(name(a)?);
                table = Some(name(b)?);
                3
            }
            [a, ..] => {
                table = Some(name(a)?);
                1
            }
            [] => return Err(ineligible("FROM must name a table")),
        };
        match &src[k..] {
            [] => {}
            [as_kw, a] if as_kw.is_word("as") => alias = Some(a.text.to_string()),
            [a] if a.kind == TokenKind::Word || a.kind == TokenKind::QuotedIdent => alias = Some(a.text.to_string()),
            _ => return Err(ineligible("only a single table can be scanned")),
        }
    }
    let predicate = where_at.map(|w| {
        let start = tokens[sig[w]].end();
        let end = sig.last().map(|&i| tokens[i].end()).unwrap_or(sql.len());
        sql[start..end.max(start)].trim().to_string()
    });
    if predicate.as_deref() == Some("") {
        return Err(ineligible("empty WHERE clause"));
    }
    Ok(RiderQuery { projection, table, qualifier, alias, predicate })
}

/// Reads buckets and evaluates riders against the bucket in hand.
pub trait BucketSource {
    /// Makes bucket `index` of `n_buckets` current; returns its row count.
    fn load_bucket(&mut self, index: usize, n_buckets: usize) -> Result<u64>;
    /// Applies `query` to the current bucket.
    fn evaluate(&mut self, query: &RiderQuery) -> Result<RowBatch>;
}

/// Where a rider's matches go.
pub trait RiderSink: Send {
    fn accept(&mut self, batch: &RowBatch) -> Result<()>;
    /// Called once after the last bucket.
    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Collects matches in memory.
#[derive(Debug, Default)]
pub struct VecSink {
    pub batches: Vec<RowBatch>,
}

impl RiderSink for VecSink {
    fn accept(&mut self, batch: &RowBatch) -> Result<()> {
        self.batches.push(batch.clone());
        Ok(())
    }
}

impl RiderSink for std::sync::Arc<std::sync::Mutex<VecSink>> {
    fn accept(&mut self, batch: &RowBatch) -> Result<()> {
        self.lock().unwrap().accept(batch)
    }
}

pub struct Rider {
    pub id: RiderId,
    pub query: RiderQuery,
    pub boarded_at: usize,
    pub buckets_seen: usize,
    pub rows_out: u64,
    /// Bucket ids in the order this rider saw them.
    pub trace: Vec<usize>,
    sink: Box<dyn RiderSink>,
}

impl std::fmt::Debug for Rider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rider")
            .field("id", &self.id)
            .field("boarded_at", &self.boarded_at)
            .field("buckets_seen", &self.buckets_seen)
            .finish()
    }
}

/// A rider that left the wheel, normally or not.
#[derive(Debug)]
pub struct Departure {
    pub id: RiderId,
    pub boarded_at: usize,
    pub trace: Vec<usize>,
    pub rows_out: u64,
    pub result: Result<()>,
}

#[derive(Debug)]
pub struct StepReport {
    pub bucket: usize,
    pub rows_scanned: u64,
    pub departures: Vec<Departure>,
}

/// The wheel state machine. Driving it (and supplying buckets) is the
/// caller's business; see [`WheelRegistry`] for the threaded driver.
#[derive(Debug)]
pub struct ScanWheel {
    pub context: String,
    pub table: String,
    n_buckets: usize,
    position: usize,
    riders: Vec<Rider>,
    next_id: RiderId,
    bucket_reads: u64,
    riders_served: u64,
}

impl ScanWheel {
    pub fn new(context: &str, table: &str, n_buckets: usize) -> Self {
        ScanWheel {
            context: context.to_string(),
            table: table.to_string(),
            n_buckets: n_buckets.max(1),
            position: 0,
            riders: Vec::new(),
            next_id: 1,
            bucket_reads: 0,
            riders_served: 0,
        }
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    /// Next bucket to be read.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn riders(&self) -> &[Rider] {
        &self.riders
    }

    pub fn is_idle(&self) -> bool {
        self.riders.is_empty()
    }

    pub fn bucket_reads(&self) -> u64 {
        self.bucket_reads
    }

    pub fn riders_served(&self) -> u64 {
        self.riders_served
    }

    /// Checks that `query` can ride this wheel.
    pub fn check(&self, query: &RiderQuery) -> Result<()> {
        if let Some(t) = &query.table {
            if !t.eq_ignore_ascii_case(&self.table) {
                return Err(Error::Ineligible(format!("wheel scans {}, not {t}", self.table)));
            }
        }
        if let Some(q) = &query.qualifier {
            if !q.eq_ignore_ascii_case(&self.context) {
                return Err(Error::Ineligible(format!("wheel scans context {}, not {q}", self.context)));
            }
        }
        Ok(())
    }

    /// Boards a rider at the current boundary, which is the next bucket to
    /// be read.
    pub fn admit(&mut self, query: RiderQuery, sink: Box<dyn RiderSink>) -> Result<RiderId> {
        self.check(&query)?;
        let id = self.next_id;
        self.next_id += 1;
        self.riders.push(Rider {
            id,
            query,
            boarded_at: self.position,
            buckets_seen: 0,
            rows_out: 0,
            trace: Vec::with_capacity(self.n_buckets),
            sink,
        });
        Ok(id)
    }

    /// Parses and admits a query.
    pub fn admit_sql(&mut self, sql: &str, sink: Box<dyn RiderSink>) -> Result<RiderId> {
        self.admit(parse_rider_query(sql)?, sink)
    }

    /// Removes a rider before its revolution completes.
    pub fn eject(&mut self, id: RiderId) -> Option<Departure> {
        let at = self.riders.iter().position(|r| r.id == id)?;
        let r = self.riders.remove(at);
        Some(Departure { id: r.id, boarded_at: r.boarded_at, trace: r.trace, rows_out: r.rows_out, result: Err(Error::Canceled) })
    }

    /// Reads the current bucket once and feeds it to every rider. Returns
    /// None (and does not move) when no one is riding.
    pub fn step(&mut self, source: &mut dyn BucketSource) -> Result<Option<StepReport>> {
        if self.riders.is_empty() {
            return Ok(None);
        }
        let bucket = self.position;
        let rows_scanned = source.load_bucket(bucket, self.n_buckets)?;
        self.bucket_reads += 1;
        let mut departures = Vec::new();
        let mut keep = Vec::with_capacity(self.riders.len());
        for mut r in std::mem::take(&mut self.riders) {
            let fed = source
                .evaluate(&r.query)
                .and_then(|batch| {
                    r.rows_out += batch.rows.len() as u64;
                    r.sink.accept(&batch)
                });
            r.buckets_seen += 1;
            r.trace.push(bucket);
            let result = match fed {
                Err(e) => Some(Err(e)),
                Ok(()) if r.buckets_seen == self.n_buckets => Some(r.sink.finish()),
                Ok(()) => None,
            };
            match result {
                Some(result) => {
                    if result.is_ok() {
                        self.riders_served += 1;
                    }
                    departures.push(Departure {
                        id: r.id,
                        boarded_at: r.boarded_at,
                        trace: r.trace,
                        rows_out: r.rows_out,
                        result,
                    });
                }
                None => keep.push(r),
            }
        }
        self.riders = keep;
        self.position = (self.position + 1) % self.n_buckets;
        Ok(Some(StepReport { bucket, rows_scanned, departures }))
    }
}
