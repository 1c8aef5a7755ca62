//! Per-user scratch databases: provisioning, table management, import,
//! export, group publication and the neighbors cross-match.

pub mod formats;
pub mod xmatch;

use std::io::{BufRead, BufWriter};
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use crate::admin::AdminDb;
use crate::engine::{self, Column, ColumnType, Value};
use crate::error::{Error, Result};
use crate::model::{mydb_name_for, PublishedTable, ServerTarget, TableFormat, Timestamp, WsId};
use crate::rewriter::quote_ident;

pub use xmatch::SkyPosition;

pub const DEFAULT_QUOTA_BYTES: u64 = 500 * 1024 * 1024;

const LOAD_CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MyDbTableInfo {
    pub name: String,
    pub columns: Vec<Column>,
    pub row_count: i64,
    pub created_at: Timestamp,
    pub published_to: Vec<String>,
}

/// A provisioned MyDB.
#[derive(Debug, Clone)]
pub struct MyDbHandle {
    pub owner: WsId,
    pub name: String,
    pub target: ServerTarget,
    pub path: PathBuf,
}

impl MyDbHandle {
    pub fn open(&self) -> Result<Connection> {
        engine::open_mydb(&self.path)
    }
}

/// Returns the user's MyDB, creating it on first use on the MyDB-hosting
/// target with the fewest MyDBs (ties go to the lowest target id).
pub fn ensure_mydb(admin: &AdminDb, ws_id: WsId) -> Result<MyDbHandle> {
    if let Some(h) = existing(admin, ws_id)? {
        return Ok(h);
    }
    let counts = admin.mydb_counts()?;
    let load = |t: &ServerTarget| counts.iter().find(|(id, _)| *id == t.target_id).map_or(0, |c| c.1);
    let target = admin
        .targets()?
        .into_iter()
        .filter(|t| t.hosts_mydb)
        .min_by_key(|t| (load(t), t.target_id))
        .ok_or(Error::NoMyDbTarget)?;
    let name = mydb_name_for(ws_id);
    let path = engine::mydb_path(&target, &name);
    engine::open_mydb(&path)?;
    if !admin.set_mydb(ws_id, &name, target.target_id)? {
        // someone else provisioned it first
        return existing(admin, ws_id)?.ok_or(Error::UnknownUser(ws_id.0));
    }
    tracing::info!(user = ws_id.0, mydb = %name, target = %target.name, "provisioned MyDB");
    Ok(MyDbHandle { owner: ws_id, name, target, path })
}

/// The user's MyDB if provisioned.
pub fn existing(admin: &AdminDb, ws_id: WsId) -> Result<Option<MyDbHandle>> {
    let user = admin.user(ws_id)?;
    match (user.mydb_name, user.mydb_target) {
        (Some(name), Some(tid)) => {
            let target = admin.target(tid)?;
            let path = engine::mydb_path(&target, &name);
            Ok(Some(MyDbHandle { owner: ws_id, name, target, path }))
        }
        _ => Ok(None),
    }
}

fn table_names(conn: &Connection) -> Result<Vec<String>> {
    let mut stmt = conn.prepare(
        "SELECT name FROM sqlite_master WHERE type IN ('table', 'view') AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\'",
    )?;
    let mut names: Vec<String> = stmt.query_map([], |r| r.get(0))?.collect::<rusqlite::Result<_>>()?;
    names.sort_by(|a, b| a.to_lowercase().cmp(&b.to_lowercase()).then(a.cmp(b)));
    Ok(names)
}

fn canonical_name(conn: &Connection, table: &str) -> Result<String> {
    table_names(conn)?
        .into_iter()
        .find(|n| n.eq_ignore_ascii_case(table))
        .ok_or_else(|| Error::UnknownTable(table.to_string()))
}

fn info(admin: &AdminDb, h: &MyDbHandle, conn: &Connection, table: &str) -> Result<MyDbTableInfo> {
    let columns = engine::table_columns(conn, table)?;
    let row_count: i64 = conn.query_row(&format!("SELECT COUNT(*) FROM {}", quote_ident(table)), [], |r| r.get(0))?;
    Ok(MyDbTableInfo {
        name: table.to_string(),
        columns,
        row_count,
        created_at: admin.note_table(&h.name, table, Timestamp::now())?,
        published_to: admin.publications_of(h.owner, table)?,
    })
}

/// Tables in the user's MyDB sorted by name; empty if none was provisioned.
pub fn list_tables(admin: &AdminDb, ws_id: WsId) -> Result<Vec<MyDbTableInfo>> {
    let Some(h) = existing(admin, ws_id)? else {
        return Ok(Vec::new());
    };
    let conn = h.open()?;
    table_names(&conn)?.iter().map(|t| info(admin, &h, &conn, t)).collect()
}

pub fn table_info(admin: &AdminDb, ws_id: WsId, table: &str) -> Result<MyDbTableInfo> {
    let h = existing(admin, ws_id)?.ok_or_else(|| Error::UnknownTable(table.to_string()))?;
    let conn = h.open()?;
    let name = canonical_name(&conn, table)?;
    info(admin, &h, &conn, &name)
}

/// Drops a MyDB table and withdraws every publication of it.
pub fn drop_table(admin: &AdminDb, ws_id: WsId, table: &str) -> Result<()> {
    let h = existing(admin, ws_id)?.ok_or_else(|| Error::UnknownTable(table.to_string()))?;
    let conn = h.open()?;
    let name = canonical_name(&conn, table)?;
    let is_view: bool = conn.query_row(
        "SELECT type = 'view' FROM sqlite_master WHERE name = ?1",
        [&name],
        |r| r.get(0),
    )?;
    let kind = if is_view { "VIEW" } else { "TABLE" };
    conn.execute_batch(&format!("DROP {kind} {}", quote_ident(&name)))?;
    admin.unpublish_table(ws_id, &name)?;
    admin.forget_table(&h.name, &name)?;
    Ok(())
}

/// Publishes a MyDB table to a group under `alias` (default: the table name).
pub fn publish(admin: &AdminDb, ws_id: WsId, table: &str, group: &str, alias: Option<&str>) -> Result<PublishedTable> {
    let g = admin.group(group)?;
    if !g.has_member(ws_id) {
        return Err(Error::NotMember(g.group_id));
    }
    let h = existing(admin, ws_id)?.ok_or_else(|| Error::UnknownTable(table.to_string()))?;
    let name = canonical_name(&h.open()?, table)?;
    let p = PublishedTable {
        group_id: g.group_id,
        publisher: ws_id,
        alias: alias.unwrap_or(&name).to_string(),
        mydb_name: h.name.clone(),
        table: name,
        published_at: Timestamp::now(),
    };
    admin.publish(&p)?;
    Ok(p)
}

fn check_quota(path: &Path, quota: u64) -> Result<()> {
    if engine::database_bytes(path) > quota {
        Err(Error::QuotaExceeded { quota })
    } else {
        Ok(())
    }
}

fn validate_table_name(table: &str) -> Result<()> {
    if table.trim().is_empty() || table.contains('\0') || table.to_ascii_lowercase().starts_with("sqlite_") {
        return Err(Error::Invalid(format!("invalid table name {table:?}")));
    }
    Ok(())
}

/// Loads a CSV or VOTable stream into a new MyDB table.
///
/// A failed load leaves no table behind.
pub fn import_table(
    admin: &AdminDb,
    ws_id: WsId,
    input: impl BufRead,
    format: TableFormat,
    table: &str,
    quota: u64,
) -> Result<MyDbTableInfo> {
    validate_table_name(table)?;
    let h = ensure_mydb(admin, ws_id)?;
    let conn = h.open()?;
    if engine::table_exists(&conn, "main", table)? {
        return Err(Error::TableExists(table.to_string()));
    }
    check_quota(&h.path, quota)?;
    let mut src = formats::open_source(input, format)?;
    engine::create_table(&conn, table, src.columns())?;
    let n = src.columns().len();
    let mut load = || -> Result<()> {
        loop {
            let chunk = src.next_chunk(LOAD_CHUNK)?;
            if chunk.is_empty() {
                return Ok(());
            }
            engine::insert_rows(&conn, table, n, &chunk)?;
            check_quota(&h.path, quota)?;
        }
    };
    if let Err(e) = load() {
        let _ = conn.execute_batch(&format!("DROP TABLE {}", quote_ident(table)));
        return Err(e);
    }
    admin.forget_table(&h.name, table)?;
    admin.note_table(&h.name, table, Timestamp::now())?;
    info(admin, &h, &conn, table)
}

/// Writes a MyDB table to `path` in `format`; returns the row count.
pub fn export_to_file(admin: &AdminDb, ws_id: WsId, table: &str, format: TableFormat, path: &Path) -> Result<i64> {
    let h = existing(admin, ws_id)?.ok_or_else(|| Error::UnknownTable(table.to_string()))?;
    let conn = h.open()?;
    let name = canonical_name(&conn, table)?;
    let tmp = path.with_extension("partial");
    let file = std::fs::File::create(&tmp)?;
    let n = write_table(&conn, &name, format, BufWriter::new(file))?;
    std::fs::rename(&tmp, path)?;
    Ok(n)
}

/// Streams `table` from `conn` through a format writer.
pub fn write_table(conn: &Connection, table: &str, format: TableFormat, out: impl std::io::Write) -> Result<i64> {
    let columns = engine::table_columns(conn, table)?;
    let mut w = formats::writer_for(out, format, table);
    w.begin(&columns)?;
    let mut stmt = conn.prepare(&format!("SELECT * FROM {}", quote_ident(table)))?;
    let n = columns.len();
    let mut rows = stmt.query([])?;
    let mut count = 0i64;
    let mut row_buf: Vec<Value> = Vec::with_capacity(n);
    while let Some(r) = rows.next()? {
        row_buf.clear();
        for i in 0..n {
            row_buf.push(Value::from_ref(r.get_ref(i)?));
        }
        w.row(&row_buf)?;
        count += 1;
    }
    w.finish()?;
    Ok(count)
}

/// Parameters of a neighbors run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborRequest {
    pub my_table: String,
    pub context: String,
    pub target_table: String,
    pub radius_arcmin: f64,
    #[serde(default = "default_ra")]
    pub ra_column: String,
    #[serde(default = "default_dec")]
    pub dec_column: String,
    #[serde(default)]
    pub my_id_column: Option<String>,
    #[serde(default)]
    pub match_id_column: Option<String>,
}

fn default_ra() -> String {
    "ra".into()
}

fn default_dec() -> String {
    "dec".into()
}

impl NeighborRequest {
    pub fn new(my_table: &str, context: &str, target_table: &str, radius_arcmin: f64) -> Self {
        NeighborRequest {
            my_table: my_table.into(),
            context: context.into(),
            target_table: target_table.into(),
            radius_arcmin,
            ra_column: default_ra(),
            dec_column: default_dec(),
            my_id_column: None,
            match_id_column: None,
        }
    }
}

/// Cross-matches a MyDB table against a catalog table, writing
/// `<my_table>_neighbors(my_id, match_id, dist_arcmin)` into MyDB.
pub fn neighbors(admin: &AdminDb, ws_id: WsId, req: &NeighborRequest, quota: u64) -> Result<MyDbTableInfo> {
    xmatch::validate_radius(req.radius_arcmin)?;
    let h = existing(admin, ws_id)?.ok_or_else(|| Error::UnknownTable(req.my_table.clone()))?;
    let conn = h.open()?;
    let my_table = canonical_name(&conn, &req.my_table)?;
    let my_cols = xmatch::resolve_coords(&conn, &my_table, &req.ra_column, &req.dec_column, req.my_id_column.as_deref())?;

    let cat_target = admin
        .targets()?
        .into_iter()
        .find(|t| t.serves_context(&req.context))
        .ok_or_else(|| Error::UnknownContext { context: req.context.clone(), queue: "any".into() })?;
    let cat = engine::open_catalog(&engine::context_path(&cat_target, &req.context))?;
    if !engine::table_exists(&cat, "main", &req.target_table)? {
        return Err(Error::UnknownTable(format!("{}.{}", req.context, req.target_table)));
    }
    let cat_cols = xmatch::resolve_coords(&cat, &req.target_table, &req.ra_column, &req.dec_column, req.match_id_column.as_deref())?;

    let out = format!("{my_table}_neighbors");
    if engine::table_exists(&conn, "main", &out)? {
        return Err(Error::TableExists(out));
    }
    let id_type = |c: &xmatch::Coords, cols: Vec<Column>| {
        c.id.as_ref()
            .and_then(|id| cols.into_iter().find(|x| &x.name == id).map(|x| x.ty))
            .unwrap_or(ColumnType::Integer)
    };
    let schema = vec![
        Column::new("my_id", id_type(&my_cols, engine::table_columns(&conn, &my_table)?)),
        Column::new("match_id", id_type(&cat_cols, engine::table_columns(&cat, &req.target_table)?)),
        Column::new("dist_arcmin", ColumnType::Float),
    ];
    check_quota(&h.path, quota)?;
    engine::create_table(&conn, &out, &schema)?;

    let writer = engine::open_mydb(&h.path)?;
    let mut buf: Vec<Vec<Value>> = Vec::with_capacity(LOAD_CHUNK);
    let flush = |buf: &mut Vec<Vec<Value>>| -> Result<()> {
        engine::insert_rows(&writer, &out, 3, buf)?;
        buf.clear();
        check_quota(&h.path, quota)
    };
    let run = xmatch::cross_match(
        &conn,
        &my_table,
        &my_cols,
        &cat,
        &req.target_table,
        &cat_cols,
        req.radius_arcmin,
        &mut |a, b, d| {
            buf.push(vec![a, b, Value::Float(d)]);
            if buf.len() == LOAD_CHUNK {
                flush(&mut buf)?;
            }
            Ok(())
        },
    )
    .and_then(|_| flush(&mut buf));
    if let Err(e) = run {
        let _ = writer.execute_batch(&format!("DROP TABLE {}", quote_ident(&out)));
        return Err(e);
    }
    admin.note_table(&h.name, &out, Timestamp::now())?;
    info(admin, &h, &conn, &out)
}
