//! The embedded relational engine (SQLite) and how databases are laid out
//! on a target.
//!
//! A target's locator is a directory. Catalog context `C` lives in
//! `<locator>/C.db`; a user's MyDB `mydb_000042` in
//! `<locator>/mydb_000042.db`. Execution connections use an empty in-memory
//! main database and attach the context read-only under its own name, then
//! the user's MyDB read-write under its physical name, so rewritten queries
//! resolve without further translation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rusqlite::functions::FunctionFlags;
use rusqlite::hooks::{AuthAction, AuthContext, Authorization};
use rusqlite::types::ValueRef;
use rusqlite::{Connection, InterruptHandle, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ServerTarget;
use crate::rewriter::quote_ident;

/// The canonical column type set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Integer,
    Float,
    Text,
    Timestamp,
}

impl ColumnType {
    pub fn sql_name(self) -> &'static str {
        match self {
            ColumnType::Integer => "INTEGER",
            ColumnType::Float => "REAL",
            ColumnType::Text => "TEXT",
            ColumnType::Timestamp => "TIMESTAMP",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColumnType::Integer => "integer",
            ColumnType::Float => "float",
            ColumnType::Text => "text",
            ColumnType::Timestamp => "timestamp",
        }
    }

    /// Maps a declared SQL type onto the canonical set, following SQLite's
    /// affinity rules with timestamps recognized first.
    pub fn from_decl(decl: &str) -> Option<ColumnType> {
        let d = decl.to_ascii_uppercase();
        if d.is_empty() {
            None
        } else if d.contains("TIMESTAMP") || d.contains("DATE") || d.contains("TIME") {
            Some(ColumnType::Timestamp)
        } else if d.contains("INT") {
            Some(ColumnType::Integer)
        } else if d.contains("CHAR") || d.contains("CLOB") || d.contains("TEXT") || d.contains("BLOB") {
            Some(ColumnType::Text)
        } else if d.contains("REAL") || d.contains("FLOA") || d.contains("DOUB") || d.contains("NUM") {
            Some(ColumnType::Float)
        } else {
            None
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

impl Column {
    pub fn new(name: impl Into<String>, ty: ColumnType) -> Self {
        Column { name: name.into(), ty }
    }
}

/// A single cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Integer(i64),
    Float(f64),
    Text(String),
}

impl Value {
    pub fn from_ref(v: ValueRef<'_>) -> Value {
        match v {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(f) => Value::Float(f),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Text(hex::encode(b)),
        }
    }

    pub fn column_type(&self) -> Option<ColumnType> {
        match self {
            Value::Null => None,
            Value::Integer(_) => Some(ColumnType::Integer),
            Value::Float(_) => Some(ColumnType::Float),
            Value::Text(_) => Some(ColumnType::Text),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            Value::Text(t) => t.trim().parse().ok(),
            Value::Null => None,
        }
    }

    /// Rough in-memory footprint, for accounting.
    pub fn approx_bytes(&self) -> usize {
        std::mem::size_of::<Value>()
            + match self {
                Value::Text(t) => t.len(),
                _ => 0,
            }
    }
}

impl rusqlite::ToSql for Value {
    fn to_sql(&self) -> rusqlite::Result<rusqlite::types::ToSqlOutput<'_>> {
        use rusqlite::types::{ToSqlOutput, ValueRef as V};
        Ok(match self {
            Value::Null => ToSqlOutput::Borrowed(V::Null),
            Value::Integer(i) => ToSqlOutput::Borrowed(V::Integer(*i)),
            Value::Float(f) => ToSqlOutput::Borrowed(V::Real(*f)),
            Value::Text(s) => ToSqlOutput::Borrowed(V::Text(s.as_bytes())),
        })
    }
}

pub fn context_path(target: &ServerTarget, context: &str) -> PathBuf {
    Path::new(&target.locator).join(format!("{context}.db"))
}

pub fn mydb_path(target: &ServerTarget, mydb_name: &str) -> PathBuf {
    Path::new(&target.locator).join(format!("{mydb_name}.db"))
}

fn uri_for(path: &Path, read_only: bool) -> String {
    let raw = path.to_string_lossy();
    let mut enc = String::with_capacity(raw.len() + 16);
    for c in raw.chars() {
        match c {
            '%' => enc.push_str("%25"),
            '?' => enc.push_str("%3f"),
            '#' => enc.push_str("%23"),
            c => enc.push(c),
        }
    }
    if read_only {
        format!("file:{enc}?mode=ro")
    } else {
        format!("file:{enc}")
    }
}

fn sql_literal(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

/// Why an execution was stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Canceled,
    Timeout,
}

/// Cross-thread stop switch for one execution: a flag checked between chunks
/// and by the engine's progress callback, plus interrupt handles for
/// statements stalled inside the engine.
#[derive(Clone, Default)]
pub struct StopHandle {
    inner: Arc<StopInner>,
}

#[derive(Default)]
struct StopInner {
    reason: AtomicU8,
    interrupts: Mutex<Vec<InterruptHandle>>,
    deadline: Mutex<Option<Instant>>,
}

impl StopHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_deadline(timeout: Duration) -> Self {
        let h = Self::default();
        h.set_deadline(Instant::now() + timeout);
        h
    }

    pub fn set_deadline(&self, at: Instant) {
        *self.inner.deadline.lock().unwrap() = Some(at);
    }

    pub fn stop(&self, reason: StopReason) {
        let code = match reason {
            StopReason::Canceled => 1,
            StopReason::Timeout => 2,
        };
        let _ = self.inner.reason.compare_exchange(0, code, Ordering::SeqCst, Ordering::SeqCst);
        for h in self.inner.interrupts.lock().unwrap().iter() {
            h.interrupt();
        }
    }

    /// Checks the deadline, then reports whether execution must stop.
    pub fn poll(&self) -> Option<StopReason> {
        if self.inner.reason.load(Ordering::SeqCst) == 0 {
            let due = self.inner.deadline.lock().unwrap().is_some_and(|d| Instant::now() >= d);
            if due {
                self.stop(StopReason::Timeout);
            }
        }
        self.reason()
    }

    pub fn reason(&self) -> Option<StopReason> {
        match self.inner.reason.load(Ordering::SeqCst) {
            0 => None,
            1 => Some(StopReason::Canceled),
            _ => Some(StopReason::Timeout),
        }
    }

    pub fn check(&self) -> Result<()> {
        match self.poll() {
            None => Ok(()),
            Some(StopReason::Canceled) => Err(Error::Canceled),
            Some(StopReason::Timeout) => Err(Error::QuantumExceeded),
        }
    }

    /// Converts an engine error into the stop error when a stop caused it.
    pub fn explain(&self, e: Error) -> Error {
        match self.reason() {
            Some(StopReason::Canceled) => Error::Canceled,
            Some(StopReason::Timeout) => Error::QuantumExceeded,
            None => e,
        }
    }

    /// Hooks `conn` up: progress callback, interrupt registration, and the
    /// `sleep(seconds)` function that honors the stop switch.
    pub fn arm(&self, conn: &Connection) -> Result<()> {
        self.inner.interrupts.lock().unwrap().push(conn.get_interrupt_handle());
        let me = self.clone();
        conn.progress_handler(1000, Some(move || me.poll().is_some()));
        let me = self.clone();
        conn.create_scalar_function("sleep", 1, FunctionFlags::SQLITE_UTF8, move |ctx| {
            let secs: f64 = ctx.get(0)?;
            let until = Instant::now() + Duration::from_secs_f64(secs.max(0.0));
            while Instant::now() < until {
                if me.poll().is_some() {
                    return Err(rusqlite::Error::UserFunctionError("interrupted".into()));
                }
                std::thread::sleep(Duration::from_millis(5).min(until - Instant::now()));
            }
            Ok(secs)
        })?;
        Ok(())
    }
}

/// A database to attach to an execution connection.
#[derive(Debug, Clone)]
pub struct Attachment {
    pub schema: String,
    pub path: PathBuf,
    pub access: Access,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Access {
    /// Catalog: read-only.
    Catalog,
    /// The caller's own MyDB: read-write.
    Owner,
    /// Another user's MyDB: only the listed tables may be read.
    Published(Vec<String>),
}

/// Opens an execution connection with `attachments` in order and an
/// authorizer that enforces their access modes.
pub fn open_execution(attachments: &[Attachment], stop: &StopHandle) -> Result<Connection> {
    let conn = Connection::open_with_flags(
        ":memory:",
        OpenFlags::SQLITE_OPEN_READ_WRITE
            | OpenFlags::SQLITE_OPEN_CREATE
            | OpenFlags::SQLITE_OPEN_URI
            | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?;
    conn.busy_timeout(Duration::from_secs(30))?;
    for a in attachments {
        if a.access != Access::Owner && !a.path.exists() {
            return Err(Error::TargetUnavailable(format!(
                "database {} not found at {}",
                a.schema,
                a.path.display()
            )));
        }
        conn.execute_batch(&format!(
            "ATTACH DATABASE {} AS {}",
            sql_literal(&uri_for(&a.path, a.access != Access::Owner)),
            quote_ident(&a.schema)
        ))?;
    }
    stop.arm(&conn)?;
    install_authorizer(&conn, attachments);
    Ok(conn)
}

fn install_authorizer(conn: &Connection, attachments: &[Attachment]) {
    let rules: Vec<(String, Access)> = attachments
        .iter()
        .map(|a| (a.schema.to_ascii_lowercase(), a.access.clone()))
        .collect();
    let access_of = move |db: Option<&str>| -> Option<Access> {
        let db = db?.to_ascii_lowercase();
        rules.iter().find(|(s, _)| *s == db).map(|(_, a)| a.clone())
    };
    conn.authorizer(Some(move |ctx: AuthContext<'_>| {
        use AuthAction::*;
        let writable = |db: Option<&str>| match db {
            Some("temp") | Some("main") => true,
            other => matches!(access_of(other), Some(Access::Owner)),
        };
        match ctx.action {
            Attach { .. } | Detach { .. } | Pragma { .. } => Authorization::Deny,
            Read { table_name, .. } => match access_of(ctx.database_name) {
                Some(Access::Published(tables)) => {
                    let t = table_name.to_ascii_lowercase();
                    if t == "sqlite_master"
                        || t == "sqlite_schema"
                        || tables.iter().any(|p| p.eq_ignore_ascii_case(table_name))
                    {
                        Authorization::Allow
                    } else {
                        Authorization::Deny
                    }
                }
                _ => Authorization::Allow,
            },
            Insert { .. }
            | Update { .. }
            | Delete { .. }
            | CreateTable { .. }
            | CreateIndex { .. }
            | CreateView { .. }
            | CreateTrigger { .. }
            | DropTable { .. }
            | DropIndex { .. }
            | DropView { .. }
            | DropTrigger { .. }
            | AlterTable { .. }
            | Reindex { .. }
            | Analyze { .. } => {
                if writable(ctx.database_name) {
                    Authorization::Allow
                } else {
                    Authorization::Deny
                }
            }
            _ => Authorization::Allow,
        }
    }));
}

/// Opens a MyDB file directly for writing (created on demand).
pub fn open_mydb(path: &Path) -> Result<Connection> {
    let conn = Connection::open(path)?;
    conn.busy_timeout(Duration::from_secs(30))?;
    conn.pragma_update(None, "journal_mode", "WAL")?;
    conn.pragma_update(None, "synchronous", "NORMAL")?;
    Ok(conn)
}

/// Opens a catalog for reading only.
pub fn open_catalog(path: &Path) -> Result<Connection> {
    if !path.exists() {
        return Err(Error::TargetUnavailable(format!("no catalog at {}", path.display())));
    }
    let conn = Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?;
    conn.busy_timeout(Duration::from_secs(30))?;
    Ok(conn)
}

pub fn table_exists(conn: &Connection, schema: &str, table: &str) -> Result<bool> {
    let sql = format!(
        "SELECT 1 FROM {}.sqlite_master WHERE type IN ('table', 'view') AND name = ?1 COLLATE NOCASE",
        quote_ident(schema)
    );
    let mut stmt = conn.prepare(&sql)?;
    Ok(stmt.exists([table])?)
}

pub fn create_table(conn: &Connection, table: &str, columns: &[Column]) -> Result<()> {
    let cols: Vec<String> = columns
        .iter()
        .map(|c| format!("{} {}", quote_ident(&c.name), c.ty.sql_name()))
        .collect();
    conn.execute_batch(&format!("CREATE TABLE {} ({})", quote_ident(table), cols.join(", ")))?;
    Ok(())
}

/// Inserts `rows` in one transaction.
pub fn insert_rows(conn: &Connection, table: &str, n_cols: usize, rows: &[Vec<Value>]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let placeholders = vec!["?"; n_cols].join(", ");
    let tx = conn.unchecked_transaction()?;
    {
        let mut stmt = tx.prepare_cached(&format!(
            "INSERT INTO {} VALUES ({placeholders})",
            quote_ident(table)
        ))?;
        for row in rows {
            stmt.execute(rusqlite::params_from_iter(row.iter()))?;
        }
    }
    tx.commit()?;
    Ok(())
}

/// Columns of `table` in the database `conn` is opened on.
pub fn table_columns(conn: &Connection, table: &str) -> Result<Vec<Column>> {
    let stmt = conn.prepare(&format!("SELECT * FROM {} LIMIT 0", quote_ident(table)))?;
    let cols = stmt
        .columns()
        .iter()
        .map(|c| {
            Column::new(
                c.name(),
                c.decl_type().and_then(ColumnType::from_decl).unwrap_or(ColumnType::Text),
            )
        })
        .collect();
    stmt.finalize()?;
    Ok(cols)
}

/// On-disk size of a database including its write-ahead log.
pub fn database_bytes(path: &Path) -> u64 {
    let mut total = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
    let mut wal = path.as_os_str().to_owned();
    wal.push("-wal");
    total += std::fs::metadata(PathBuf::from(wal)).map(|m| m.len()).unwrap_or(0);
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(dir: &Path) -> PathBuf {
        let p = dir.join("CAT.db");
        let c = Connection::open(&p).unwrap();
        c.execute_batch("CREATE TABLE galaxy (obj_id INTEGER PRIMARY KEY, r REAL); INSERT INTO galaxy VALUES (1, 20.0), (2, 21.5);")
            .unwrap();
        p
    }

    #[test]
    fn decl_types_map_to_canonical_set() {
        assert_eq!(ColumnType::from_decl("INTEGER"), Some(ColumnType::Integer));
        assert_eq!(ColumnType::from_decl("double precision"), Some(ColumnType::Float));
        assert_eq!(ColumnType::from_decl("varchar(20)"), Some(ColumnType::Text));
        assert_eq!(ColumnType::from_decl("TIMESTAMP"), Some(ColumnType::Timestamp));
        assert_eq!(ColumnType::from_decl(""), None);
    }

    #[test]
    fn catalog_is_read_only_and_mydb_writable() {
        let dir = tempfile::tempdir().unwrap();
        let cat = catalog(dir.path());
        let stop = StopHandle::new();
        let conn = open_execution(
            &[
                Attachment { schema: "CAT".into(), path: cat, access: Access::Catalog },
                Attachment {
                    schema: "mydb_000001".into(),
                    path: dir.path().join("mydb_000001.db"),
                    access: Access::Owner,
                },
            ],
            &stop,
        )
        .unwrap();
        let n: i64 = conn.query_row("SELECT COUNT(*) FROM galaxy", [], |r| r.get(0)).unwrap();
        assert_eq!(n, 2);
        assert!(conn.execute_batch("DELETE FROM galaxy").is_err());
        conn.execute_batch("CREATE TABLE mydb_000001.t AS SELECT * FROM galaxy").unwrap();
        assert!(conn.execute_batch("ATTACH DATABASE ':memory:' AS x").is_err());
        assert!(conn.execute_batch("PRAGMA journal_mode").is_err());
    }

    #[test]
    fn published_mydb_exposes_only_listed_tables() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mydb_000007.db");
        let c = open_mydb(&p).unwrap();
        c.execute_batch("CREATE TABLE shared (x); CREATE TABLE private (y); INSERT INTO shared VALUES (1);")
            .unwrap();
        drop(c);
        let conn = open_execution(
            &[Attachment {
                schema: "mydb_000007".into(),
                path: p,
                access: Access::Published(vec!["shared".into()]),
            }],
            &StopHandle::new(),
        )
        .unwrap();
        let n: i64 = conn.query_row("SELECT COUNT(*) FROM mydb_000007.shared", [], |r| r.get(0)).unwrap();
        assert_eq!(n, 1);
        assert!(conn.prepare("SELECT * FROM mydb_000007.private").is_err());
        assert!(conn.execute_batch("INSERT INTO mydb_000007.shared VALUES (2)").is_err());
    }

    #[test]
    fn missing_catalog_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let err = open_execution(
            &[Attachment { schema: "NOPE".into(), path: dir.path().join("NOPE.db"), access: Access::Catalog }],
            &StopHandle::new(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::TargetUnavailable(_)));
    }

    #[test]
    fn sleep_honors_stop() {
        let stop = StopHandle::new();
        let conn = open_execution(&[], &stop).unwrap();
        let s2 = stop.clone();
        let t = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(50));
            s2.stop(StopReason::Canceled);
        });
        let started = Instant::now();
        let r: rusqlite::Result<f64> = conn.query_row("SELECT sleep(30)", [], |r| r.get(0));
        t.join().unwrap();
        assert!(r.is_err());
        assert!(started.elapsed() < Duration::from_secs(5));
        assert_eq!(stop.reason(), Some(StopReason::Canceled));
    }

    #[test]
    fn deadline_interrupts_long_statement() {
        let stop = StopHandle::with_deadline(Duration::from_millis(100));
        let conn = open_execution(&[], &stop).unwrap();
        let r: rusqlite::Result<i64> = conn.query_row(
            "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT COUNT(*) FROM c",
            [],
            |r| r.get(0),
        );
        assert!(r.is_err());
        assert!(matches!(stop.explain(Error::Engine("x".into())), Error::QuantumExceeded));
    }
}
