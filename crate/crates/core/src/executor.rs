//! Query execution: the synchronous quick lane with row caps, and the
//! asynchronous lane that streams a result into a MyDB table chunk by chunk.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::{Connection, Statement};
use serde::{Deserialize, Serialize};

use crate::admin::{is_plain_identifier, AdminDb};
use crate::engine::{self, Access, Attachment, Column, ColumnType, StopHandle, Value};
use crate::error::{Error, Result};
use crate::model::{mydb_name_for, JobRecord};
use crate::rewriter::tokenizer::{tokenize, TokenKind};

pub const DEFAULT_CHUNK_SIZE: usize = 1000;

/// A fully materialized result.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RowSet {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Value>>,
}

/// One chunk of a streamed result.
pub type RowBatch = RowSet;

#[derive(Debug, Clone, PartialEq)]
pub enum QuickOutcome {
    Complete(RowSet),
    /// The row cap was hit; exactly `max_rows` rows are kept.
    Truncated(RowSet),
}

impl QuickOutcome {
    pub fn rows(&self) -> &RowSet {
        match self {
            QuickOutcome::Complete(r) | QuickOutcome::Truncated(r) => r,
        }
    }

    pub fn into_rows(self) -> RowSet {
        match self {
            QuickOutcome::Complete(r) | QuickOutcome::Truncated(r) => r,
        }
    }

    pub fn is_truncated(&self) -> bool {
        matches!(self, QuickOutcome::Truncated(_))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuickLimits {
    pub quantum: Duration,
    pub max_rows: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AsyncOptions {
    pub chunk_size: usize,
    /// MyDB size cap in bytes, checked after every chunk.
    pub quota_bytes: Option<u64>,
}

impl Default for AsyncOptions {
    fn default() -> Self {
        AsyncOptions { chunk_size: DEFAULT_CHUNK_SIZE, quota_bytes: None }
    }
}

/// Splits a script on top-level semicolons, dropping empty statements.
pub fn split_statements(sql: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut has_content = false;
    for t in tokenize(sql) {
        if t.is_punct(';') {
            if has_content {
                out.push(sql[start..t.start].trim());
            }
            start = t.end();
            has_content = false;
        } else if !t.is_trivia() {
            has_content = true;
        }
    }
    if has_content {
        out.push(sql[start..].trim());
    }
    out
}

/// Runs all but the last statement for effect and prepares the last one.
fn prepare_last<'c>(conn: &'c Connection, sql: &str, stop: &StopHandle) -> Result<Option<Statement<'c>>> {
    let stmts = split_statements(sql);
    let Some((last, init)) = stmts.split_last() else {
        return Ok(None);
    };
    for s in init {
        conn.execute_batch(s).map_err(|e| stop.explain(e.into()))?;
    }
    conn.prepare(last).map(Some).map_err(|e| stop.explain(e.into()))
}

/// Column list for a prepared statement.
///
/// Names that are not plain identifiers (expressions such as `1` or
/// `COUNT(*)`) become `col<n>`; duplicates get `_2`, `_3`, ... suffixes.
/// Types come from the declared column type, else the first non-null value
/// in `sample`, else text.
pub fn infer_schema(stmt: &Statement<'_>, sample: &[Vec<Value>]) -> Vec<Column> {
    let mut names: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for (i, col) in stmt.columns().iter().enumerate() {
        let base = if is_plain_identifier(col.name()) {
            col.name().to_string()
        } else {
            format!("col{}", i + 1)
        };
        let mut name = base.clone();
        let mut n = 2;
        while names.iter().any(|x| x.eq_ignore_ascii_case(&name)) {
            name = format!("{base}_{n}");
            n += 1;
        }
        names.push(name.clone());
        let ty = col
            .decl_type()
            .and_then(ColumnType::from_decl)
            .or_else(|| sample.iter().find_map(|r| r.get(i).and_then(Value::column_type)))
            .unwrap_or(ColumnType::Text);
        out.push(Column::new(name, ty));
    }
    out
}

fn read_row(row: &rusqlite::Row<'_>, n: usize) -> rusqlite::Result<Vec<Value>> {
    (0..n).map(|i| row.get_ref(i).map(Value::from_ref)).collect()
}

/// Executes `sql` synchronously on an execution connection armed with `stop`.
pub fn run_quick(conn: &Connection, sql: &str, limits: QuickLimits, stop: &StopHandle) -> Result<QuickOutcome> {
    stop.set_deadline(Instant::now() + limits.quantum);
    let Some(mut stmt) = prepare_last(conn, sql, stop)? else {
        return Ok(QuickOutcome::Complete(RowSet::default()));
    };
    let n = stmt.column_count();
    if n == 0 {
        stmt.raw_execute().map_err(|e| stop.explain(e.into()))?;
        return Ok(QuickOutcome::Complete(RowSet::default()));
    }
    let cap = limits.max_rows.unwrap_or(usize::MAX);
    let mut rows = Vec::new();
    let mut truncated = false;
    {
        let mut cursor = stmt.raw_query();
        while let Some(row) = cursor.next().map_err(|e| stop.explain(e.into()))? {
            if rows.len() == cap {
                truncated = true;
                break;
            }
            rows.push(read_row(row, n)?);
        }
    }
    stop.check()?;
    let columns = infer_schema(&stmt, &rows);
    let set = RowSet { columns, rows };
    Ok(if truncated { QuickOutcome::Truncated(set) } else { QuickOutcome::Complete(set) })
}

/// Streams the result of `sql` into `table` of the MyDB at `mydb_path`.
///
/// The table is created from the first chunk's schema; every chunk is
/// committed before the next is read and `progress` is told the running
/// total. On error the committed chunks stay in place. Statements that
/// produce no result set (DDL, INSERT) are executed and their change count
/// returned.
pub fn run_async(
    conn: &Connection,
    sql: &str,
    dest: Option<(&Path, &str)>,
    opts: &AsyncOptions,
    stop: &StopHandle,
    progress: &mut dyn FnMut(i64) -> Result<()>,
) -> Result<i64> {
    let chunk_size = opts.chunk_size.max(1);
    let sink = match dest {
        Some((path, table)) => {
            let c = engine::open_mydb(path)?;
            if engine::table_exists(&c, "main", table)? {
                return Err(Error::TableExists(table.to_string()));
            }
            Some((c, path, table))
        }
        None => None,
    };

    let Some(mut stmt) = prepare_last(conn, sql, stop)? else {
        return Ok(0);
    };
    let n = stmt.column_count();
    if n == 0 {
        let changed = stmt.raw_execute().map_err(|e| stop.explain(e.into()))?;
        let changed = changed as i64;
        progress(changed)?;
        return Ok(changed);
    }

    let mut total: i64 = 0;
    let created = std::cell::Cell::new(false);
    let mut buf: Vec<Vec<Value>> = Vec::with_capacity(chunk_size);
    let mut flush = |buf: &mut Vec<Vec<Value>>, stmt: &Statement<'_>, total: &mut i64, last: bool| -> Result<()> {
        if let Some((sink_conn, path, table)) = &sink {
            if !created.get() {
                let cols = infer_schema(stmt, buf);
                engine::create_table(sink_conn, table, &cols)?;
                created.set(true);
            }
            engine::insert_rows(sink_conn, table, n, buf)?;
            if let Some(q) = opts.quota_bytes {
                if engine::database_bytes(path) > q {
                    return Err(Error::QuotaExceeded { quota: q });
                }
            }
        }
        *total += buf.len() as i64;
        buf.clear();
        if !last {
            stop.check()?;
        }
        progress(*total)
    };

    let mut cursor = stmt.raw_query();
    loop {
        match cursor.next() {
            Ok(Some(row)) => {
                buf.push(read_row(row, n)?);
                if buf.len() == chunk_size {
                    let stmt_ref = cursor.as_ref().expect("live cursor has a statement");
                    flush(&mut buf, stmt_ref, &mut total, false)?;
                }
            }
            Ok(None) => break,
            Err(e) => return Err(stop.explain(e.into())),
        }
    }
    drop(cursor);
    stop.check()?;
    if !buf.is_empty() || !created.get() {
        flush(&mut buf, &stmt, &mut total, true)?;
    }
    Ok(total)
}

/// The databases a job's execution connection needs, in resolution order:
/// the job's context, the target's other contexts, the caller's MyDB, then
/// any publisher MyDBs the rewritten text names.
pub fn attachments_for(admin: &AdminDb, job: &JobRecord) -> Result<Vec<Attachment>> {
    let target = admin.target(job.target_id)?;
    let mut out = vec![Attachment {
        schema: job.context.clone(),
        path: engine::context_path(&target, &job.context),
        access: Access::Catalog,
    }];
    for c in &target.context_names {
        if !c.eq_ignore_ascii_case(&job.context) {
            out.push(Attachment {
                schema: c.clone(),
                path: engine::context_path(&target, c),
                access: Access::Catalog,
            });
        }
    }
    let user = admin.user(job.user_id)?;
    if let (Some(name), Some(tid)) = (&user.mydb_name, user.mydb_target) {
        let t = admin.target(tid)?;
        out.push(Attachment { schema: name.clone(), path: engine::mydb_path(&t, name), access: Access::Owner });
    }
    let own = mydb_name_for(user.ws_id);
    let published = admin.published_for(user.ws_id)?;
    for name in referenced_mydbs(&job.rewritten_text) {
        if name.eq_ignore_ascii_case(&own) || out.iter().any(|a| a.schema.eq_ignore_ascii_case(&name)) {
            continue;
        }
        let tables: Vec<String> = published
            .iter()
            .filter(|p| p.mydb_name.eq_ignore_ascii_case(&name))
            .map(|p| p.table.clone())
            .collect();
        if tables.is_empty() {
            return Err(Error::NotPublished(name));
        }
        let publisher = admin.user_by_mydb(&name)?.ok_or_else(|| Error::NotPublished(name.clone()))?;
        let tid = publisher.mydb_target.ok_or_else(|| Error::NotPublished(name.clone()))?;
        let t = admin.target(tid)?;
        out.push(Attachment { path: engine::mydb_path(&t, &name), schema: name, access: Access::Published(tables) });
    }
    Ok(out)
}

/// Physical MyDB names used as qualifiers (`mydb_000007.t`) in `sql`.
pub fn referenced_mydbs(sql: &str) -> Vec<String> {
    let tokens = tokenize(sql);
    let mut out: Vec<String> = Vec::new();
    for w in tokens.windows(2) {
        let t = &w[0];
        if t.kind == TokenKind::Word && w[1].is_punct('.') && is_mydb_name(t.text) {
            let name = t.text.to_ascii_lowercase();
            if !out.contains(&name) {
                out.push(name);
            }
        }
    }
    out
}

fn is_mydb_name(s: &str) -> bool {
    s.len() > 5 && s[..5].eq_ignore_ascii_case("mydb_") && s[5..].bytes().all(|b| b.is_ascii_digit())
}

/// Where a Query job's result goes: its MyDB file and table.
pub fn destination(admin: &AdminDb, job: &JobRecord) -> Result<Option<(PathBuf, String)>> {
    let Some(table) = &job.dest_table else {
        return Ok(None);
    };
    let user = admin.user(job.user_id)?;
    let (Some(name), Some(tid)) = (&user.mydb_name, user.mydb_target) else {
        return Err(Error::Invalid(format!("MyDB for user {} is not provisioned", user.ws_id)));
    };
    let t = admin.target(tid)?;
    Ok(Some((engine::mydb_path(&t, name), table.clone())))
}
