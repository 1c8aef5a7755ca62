//! The administrative database: users, queues, servers, groups, screening
//! rules, and the jobs table that coordinates every job's lifecycle.
//!
//! Each [`AdminDb`] owns one connection. Open one per thread; correctness
//! rests on single-statement compare-and-set updates, never on in-memory
//! locks.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rusqlite::{params, Connection, OptionalExtension, Row, TransactionBehavior};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::QueryStat;
use crate::model::{
    validate_queues, GroupRecord, JobEvent, JobId, JobKind, JobRecord, JobState, PublishedTable,
    QueueMode, QueueSpec, ServerTarget, TableFormat, TargetId, Timestamp, UserRecord, WsId,
};
use crate::rewriter::screen::{self, ScreenRule};

pub const SCHEMA_VERSION: i64 = 1;
const SCHEMA: &str = include_str!("schema.sql");

/// Fields of a job at submission time.
#[derive(Debug, Clone)]
pub struct NewJob {
    pub user_id: WsId,
    pub queue_id: String,
    pub target_id: TargetId,
    pub context: String,
    pub job_kind: JobKind,
    pub query_text: String,
    pub rewritten_text: String,
    pub dest_table: Option<String>,
    pub format: Option<TableFormat>,
    pub t_submitted: Timestamp,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct JobFilter {
    pub state: Option<JobState>,
    pub kind: Option<JobKind>,
    pub since: Option<Timestamp>,
    pub until: Option<Timestamp>,
}

#[derive(Debug, Clone)]
pub struct ExportFile {
    pub token: String,
    pub job_id: JobId,
    pub path: PathBuf,
    pub created_at: Timestamp,
    pub purged: bool,
}

const JOB_COLUMNS: &str = "job_id, user_id, queue_id, target_id, context, job_kind, query_text, \
     rewritten_text, dest_table, format, state, t_submitted, t_started, t_finished, rows_out, \
     error_msg, output_url, cancel_requested, exec_route";

fn job_from_row(row: &Row<'_>) -> rusqlite::Result<JobRecord> {
    let kind: String = row.get(5)?;
    let format: Option<String> = row.get(9)?;
    let state: String = row.get(10)?;
    let conv = |e: Error| {
        rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e))
    };
    Ok(JobRecord {
        job_id: JobId(row.get(0)?),
        user_id: WsId(row.get(1)?),
        queue_id: row.get(2)?,
        target_id: TargetId(row.get(3)?),
        context: row.get(4)?,
        job_kind: JobKind::parse(&kind).map_err(conv)?,
        query_text: row.get(6)?,
        rewritten_text: row.get(7)?,
        dest_table: row.get(8)?,
        format: format.map(|f| TableFormat::parse(&f)).transpose().map_err(conv)?,
        state: JobState::parse(&state).map_err(conv)?,
        t_submitted: Timestamp(row.get(11)?),
        t_started: row.get::<_, Option<i64>>(12)?.map(Timestamp),
        t_finished: row.get::<_, Option<i64>>(13)?.map(Timestamp),
        rows_out: row.get(14)?,
        error_msg: row.get(15)?,
        output_url: row.get(16)?,
        cancel_requested: row.get(17)?,
        exec_route: row.get(18)?,
    })
}

fn user_from_row(row: &Row<'_>) -> rusqlite::Result<UserRecord> {
    Ok(UserRecord {
        ws_id: WsId(row.get(0)?),
        password_hash: row.get(1)?,
        email: row.get(2)?,
        notify: row.get(3)?,
        mydb_name: row.get(4)?,
        mydb_target: row.get::<_, Option<i64>>(5)?.map(TargetId),
    })
}

pub struct AdminDb {
    conn: Connection,
}

impl AdminDb {
    /// Opens (creating if needed) the admin database at `path`.
    pub fn open(path: &Path) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.busy_timeout(Duration::from_secs(30))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.pragma_update(None, "foreign_keys", true)?;
        Ok(AdminDb { conn })
    }

    pub fn open_in_memory() -> Result<Self> {
        let conn = Connection::open_in_memory()?;
        conn.pragma_update(None, "foreign_keys", true)?;
        Ok(AdminDb { conn })
    }

    /// Creates the schema and seeds default queues and screening rules on a
    /// fresh database. Safe to call repeatedly.
    pub fn init(&self) -> Result<()> {
        self.conn.execute_batch(SCHEMA)?;
        let version: Option<String> = self
            .conn
            .query_row("SELECT value FROM meta WHERE key = 'schema_version'", [], |r| r.get(0))
            .optional()?;
        match version {
            Some(v) if v.parse::<i64>().ok() == Some(SCHEMA_VERSION) => {}
            Some(v) => return Err(Error::Invalid(format!("unsupported schema version {v}"))),
            None => {
                self.conn.execute(
                    "INSERT INTO meta (key, value) VALUES ('schema_version', ?1)",
                    [SCHEMA_VERSION.to_string()],
                )?;
                for q in [QueueSpec::quick(), QueueSpec::long()] {
                    self.insert_queue(&q)?;
                }
                self.replace_rules(&screen::default_rules())?;
            }
        }
        Ok(())
    }

    pub fn schema_version(&self) -> Result<i64> {
        let v: String = self
            .conn
            .query_row("SELECT value FROM meta WHERE key = 'schema_version'", [], |r| r.get(0))?;
        v.parse().map_err(|_| Error::Invalid(format!("bad schema version {v}")))
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    // ---- queues ----

    fn insert_queue(&self, q: &QueueSpec) -> Result<()> {
        self.conn.execute(
            "INSERT OR REPLACE INTO queues (queue_id, quantum_s, mode, max_rows) VALUES (?1, ?2, ?3, ?4)",
            params![
                q.queue_id,
                q.quantum_s,
                match q.mode {
                    QueueMode::Sync => "Sync",
                    QueueMode::Async => "Async",
                },
                q.max_rows
            ],
        )?;
        Ok(())
    }

    /// Adds or replaces a queue, keeping the queue-set invariants.
    pub fn put_queue(&self, q: &QueueSpec) -> Result<()> {
        let mut all: Vec<QueueSpec> =
            self.queues()?.into_iter().filter(|x| x.queue_id != q.queue_id).collect();
        all.push(q.clone());
        validate_queues(&all)?;
        self.insert_queue(q)
    }

    pub fn queues(&self) -> Result<Vec<QueueSpec>> {
        let mut stmt = self
            .conn
            .prepare("SELECT queue_id, quantum_s, mode, max_rows FROM queues ORDER BY quantum_s, queue_id")?;
        let rows = stmt.query_map([], |r| {
            let mode: String = r.get(2)?;
            Ok(QueueSpec {
                queue_id: r.get(0)?,
                quantum_s: r.get(1)?,
                mode: if mode == "Sync" { QueueMode::Sync } else { QueueMode::Async },
                max_rows: r.get(3)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn queue(&self, queue_id: &str) -> Result<QueueSpec> {
        self.queues()?
            .into_iter()
            .find(|q| q.queue_id.eq_ignore_ascii_case(queue_id))
            .ok_or_else(|| Error::UnknownQueue(queue_id.to_string()))
    }

    pub fn quick_queue(&self) -> Result<QueueSpec> {
        self.queues()?
            .into_iter()
            .find(|q| q.mode == QueueMode::Sync)
            .ok_or_else(|| Error::Invalid("no Sync queue configured".into()))
    }

    // ---- servers ----

    /// Validates and inserts a target. The locator must be an existing
    /// directory; contexts may not collide with another target sharing a queue.
    pub fn register_target(&mut self, spec: &ServerTarget) -> Result<TargetId> {
        if spec.max_concurrent < 1 {
            return Err(Error::Invalid("max_concurrent must be at least 1".into()));
        }
        if spec.name.trim().is_empty() {
            return Err(Error::Invalid("target name is empty".into()));
        }
        for (i, c) in spec.context_names.iter().enumerate() {
            if !is_plain_identifier(c) {
                return Err(Error::Invalid(format!("context name {c:?} is not an identifier")));
            }
            if spec.context_names[..i].iter().any(|o| o.eq_ignore_ascii_case(c)) {
                return Err(Error::Invalid(format!("context {c} listed twice")));
            }
        }
        if !Path::new(&spec.locator).is_dir() {
            return Err(Error::UnreachableLocator(spec.locator.clone()));
        }
        let known_queues = self.queues()?;
        for q in &spec.queues {
            if !known_queues.iter().any(|k| &k.queue_id == q) {
                return Err(Error::UnknownQueue(q.clone()));
            }
        }

        let existing = self.targets()?;
        let tx = self.conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        for other in existing.iter().filter(|o| o.shares_queue_with(spec)) {
            if let Some(c) = spec.context_names.iter().find(|c| other.serves_context(c)) {
                let queue = spec
                    .queues
                    .iter()
                    .find(|q| other.serves_queue(q))
                    .or(other.queues.first())
                    .cloned()
                    .unwrap_or_else(|| "*".into());
                return Err(Error::DuplicateContext { context: c.clone(), queue });
            }
        }
        tx.execute(
            "INSERT INTO servers (name, locator, max_concurrent, hosts_mydb) VALUES (?1, ?2, ?3, ?4)",
            params![spec.name, spec.locator, spec.max_concurrent, spec.hosts_mydb],
        )?;
        let id = tx.last_insert_rowid();
        for (i, c) in spec.context_names.iter().enumerate() {
            tx.execute(
                "INSERT INTO server_contexts (target_id, context, position) VALUES (?1, ?2, ?3)",
                params![id, c, i as i64],
            )?;
        }
        for q in &spec.queues {
            tx.execute(
                "INSERT INTO server_queues (target_id, queue_id) VALUES (?1, ?2)",
                params![id, q],
            )?;
        }
        tx.commit()?;
        Ok(TargetId(id))
    }

    pub fn targets(&self) -> Result<Vec<ServerTarget>> {
        let mut stmt = self.conn.prepare(
            "SELECT target_id, name, locator, max_concurrent, hosts_mydb FROM servers ORDER BY target_id",
        )?;
        let mut targets = stmt
            .query_map([], |r| {
                Ok(ServerTarget {
                    target_id: TargetId(r.get(0)?),
                    name: r.get(1)?,
                    locator: r.get(2)?,
                    context_names: Vec::new(),
                    max_concurrent: r.get(3)?,
                    queues: Vec::new(),
                    hosts_mydb: r.get(4)?,
                })
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        let mut ctx = self
            .conn
            .prepare("SELECT context FROM server_contexts WHERE target_id = ?1 ORDER BY position")?;
        let mut qs = self
            .conn
            .prepare("SELECT queue_id FROM server_queues WHERE target_id = ?1 ORDER BY queue_id")?;
        for t in &mut targets {
            t.context_names = ctx
                .query_map([t.target_id.0], |r| r.get(0))?
                .collect::<rusqlite::Result<_>>()?;
            t.queues = qs
                .query_map([t.target_id.0], |r| r.get(0))?
                .collect::<rusqlite::Result<_>>()?;
        }
        Ok(targets)
    }

    pub fn target(&self, id: TargetId) -> Result<ServerTarget> {
        self.targets()?
            .into_iter()
            .find(|t| t.target_id == id)
            .ok_or_else(|| Error::UnknownTarget(id.to_string()))
    }

    pub fn target_by_name(&self, name: &str) -> Result<ServerTarget> {
        self.targets()?
            .into_iter()
            .find(|t| t.name == name || t.target_id.to_string() == name)
            .ok_or_else(|| Error::UnknownTarget(name.to_string()))
    }

    /// The target serving `context` for `queue_id`.
    pub fn target_for(&self, context: &str, queue_id: &str) -> Result<ServerTarget> {
        self.targets()?
            .into_iter()
            .find(|t| t.serves_queue(queue_id) && t.serves_context(context))
            .ok_or_else(|| Error::UnknownContext {
                context: context.to_string(),
                queue: queue_id.to_string(),
            })
    }

    /// Adds a context to an existing target (used after generating a catalog).
    pub fn add_context(&mut self, target: TargetId, context: &str) -> Result<()> {
        let t = self.target(target)?;
        if t.serves_context(context) {
            return Ok(());
        }
        if !is_plain_identifier(context) {
            return Err(Error::Invalid(format!("context name {context:?} is not an identifier")));
        }
        for other in self.targets()?.iter().filter(|o| o.target_id != target) {
            if other.shares_queue_with(&t) && other.serves_context(context) {
                return Err(Error::DuplicateContext {
                    context: context.to_string(),
                    queue: t.queues.first().cloned().unwrap_or_else(|| "*".into()),
                });
            }
        }
        self.conn.execute(
            "INSERT INTO server_contexts (target_id, context, position) VALUES (?1, ?2, ?3)",
            params![target.0, context, t.context_names.len() as i64],
        )?;
        Ok(())
    }

    // ---- users ----

    pub fn create_user(&self, password: &str, email: Option<&str>, notify: bool) -> Result<WsId> {
        self.conn.execute(
            "INSERT INTO users (password_hash, email, notify) VALUES (?1, ?2, ?3)",
            params![crate::auth::hash_password(password), email, notify],
        )?;
        Ok(WsId(self.conn.last_insert_rowid()))
    }

    /// Creates a user with a caller-chosen id.
    pub fn create_user_with_id(
        &self,
        ws_id: WsId,
        password: &str,
        email: Option<&str>,
        notify: bool,
    ) -> Result<WsId> {
        self.conn.execute(
            "INSERT INTO users (ws_id, password_hash, email, notify) VALUES (?1, ?2, ?3, ?4)",
            params![ws_id.0, crate::auth::hash_password(password), email, notify],
        )?;
        Ok(ws_id)
    }

    pub fn user(&self, ws_id: WsId) -> Result<UserRecord> {
        self.conn
            .query_row(
                "SELECT ws_id, password_hash, email, notify, mydb_name, mydb_target FROM users WHERE ws_id = ?1",
                [ws_id.0],
                user_from_row,
            )
            .optional()?
            .ok_or(Error::UnknownUser(ws_id.0))
    }

    pub fn users(&self) -> Result<Vec<UserRecord>> {
        let mut stmt = self.conn.prepare(
            "SELECT ws_id, password_hash, email, notify, mydb_name, mydb_target FROM users ORDER BY ws_id",
        )?;
        let rows = stmt.query_map([], user_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn set_notify(&self, ws_id: WsId, notify: bool, email: Option<&str>) -> Result<()> {
        let n = self.conn.execute(
            "UPDATE users SET notify = ?2, email = COALESCE(?3, email) WHERE ws_id = ?1",
            params![ws_id.0, notify, email],
        )?;
        if n == 0 {
            return Err(Error::UnknownUser(ws_id.0));
        }
        Ok(())
    }

    /// Records a user's MyDB location once. Returns false if another caller
    /// already recorded one.
    pub fn set_mydb(&self, ws_id: WsId, name: &str, target: TargetId) -> Result<bool> {
        let n = self.conn.execute(
            "UPDATE users SET mydb_name = ?2, mydb_target = ?3 WHERE ws_id = ?1 AND mydb_name IS NULL",
            params![ws_id.0, name, target.0],
        )?;
        Ok(n == 1)
    }

    /// Number of MyDBs hosted per target.
    pub fn mydb_counts(&self) -> Result<Vec<(TargetId, i64)>> {
        let mut stmt = self.conn.prepare(
            "SELECT mydb_target, COUNT(*) FROM users WHERE mydb_target IS NOT NULL GROUP BY mydb_target",
        )?;
        let rows = stmt.query_map([], |r| Ok((TargetId(r.get(0)?), r.get(1)?)))?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn user_by_mydb(&self, mydb_name: &str) -> Result<Option<UserRecord>> {
        Ok(self
            .conn
            .query_row(
                "SELECT ws_id, password_hash, email, notify, mydb_name, mydb_target FROM users WHERE mydb_name = ?1 COLLATE NOCASE",
                [mydb_name],
                user_from_row,
            )
            .optional()?)
    }

    // ---- groups ----

    pub fn create_group(&self, group_id: &str, name: &str, owner: WsId) -> Result<()> {
        if !is_plain_identifier(group_id) {
            return Err(Error::Invalid(format!("group id {group_id:?} is not an identifier")));
        }
        self.user(owner)?;
        self.conn.execute(
            "INSERT INTO \"groups\" (group_id, name, owner) VALUES (?1, ?2, ?3)",
            params![group_id, name, owner.0],
        )?;
        self.conn.execute(
            "INSERT OR IGNORE INTO group_members (group_id, ws_id) VALUES (?1, ?2)",
            params![group_id, owner.0],
        )?;
        Ok(())
    }

    pub fn add_member(&self, group_id: &str, ws_id: WsId) -> Result<()> {
        self.group(group_id)?;
        self.user(ws_id)?;
        self.conn.execute(
            "INSERT OR IGNORE INTO group_members (group_id, ws_id) VALUES (?1, ?2)",
            params![group_id, ws_id.0],
        )?;
        Ok(())
    }

    pub fn group(&self, group_id: &str) -> Result<GroupRecord> {
        let head = self
            .conn
            .query_row(
                "SELECT group_id, name, owner FROM \"groups\" WHERE group_id = ?1 COLLATE NOCASE",
                [group_id],
                |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, WsId(r.get(2)?))),
            )
            .optional()?
            .ok_or_else(|| Error::UnknownGroup(group_id.to_string()))?;
        let mut stmt = self
            .conn
            .prepare("SELECT ws_id FROM group_members WHERE group_id = ?1 ORDER BY ws_id")?;
        let members = stmt
            .query_map([&head.0], |r| Ok(WsId(r.get(0)?)))?
            .collect::<rusqlite::Result<_>>()?;
        Ok(GroupRecord { group_id: head.0, name: head.1, owner: head.2, members })
    }

    /// Groups `ws_id` belongs to.
    pub fn memberships(&self, ws_id: WsId) -> Result<Vec<GroupRecord>> {
        let mut stmt = self.conn.prepare(
            "SELECT DISTINCT group_id FROM group_members WHERE ws_id = ?1 ORDER BY group_id",
        )?;
        let ids: Vec<String> = stmt
            .query_map([ws_id.0], |r| r.get(0))?
            .collect::<rusqlite::Result<_>>()?;
        ids.iter().map(|g| self.group(g)).collect()
    }

    pub fn publish(&self, p: &PublishedTable) -> Result<()> {
        let group = self.group(&p.group_id)?;
        if !group.has_member(p.publisher) {
            return Err(Error::NotMember(p.group_id.clone()));
        }
        let clash: Option<i64> = self
            .conn
            .query_row(
                "SELECT publisher FROM published_tables WHERE group_id = ?1 AND alias = ?2",
                params![group.group_id, p.alias],
                |r| r.get(0),
            )
            .optional()?;
        if let Some(owner) = clash {
            if owner != p.publisher.0 {
                return Err(Error::TableExists(format!("GROUP.{}.{}", group.group_id, p.alias)));
            }
        }
        self.conn.execute(
            "INSERT OR REPLACE INTO published_tables (group_id, publisher, alias, mydb_name, table_name, published_at) \
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![group.group_id, p.publisher.0, p.alias, p.mydb_name, p.table, p.published_at.0],
        )?;
        Ok(())
    }

    /// Removes every publication of `table` from `publisher`'s MyDB.
    pub fn unpublish_table(&self, publisher: WsId, table: &str) -> Result<usize> {
        Ok(self.conn.execute(
            "DELETE FROM published_tables WHERE publisher = ?1 AND table_name = ?2",
            params![publisher.0, table],
        )?)
    }

    /// Tables published to any group `ws_id` is a member of.
    pub fn published_for(&self, ws_id: WsId) -> Result<Vec<PublishedTable>> {
        let mut stmt = self.conn.prepare(
            "SELECT p.group_id, p.publisher, p.alias, p.mydb_name, p.table_name, p.published_at \
             FROM published_tables p \
             WHERE p.group_id IN (SELECT group_id FROM group_members WHERE ws_id = ?1) \
             ORDER BY p.group_id, p.alias",
        )?;
        let rows = stmt.query_map([ws_id.0], |r| {
            Ok(PublishedTable {
                group_id: r.get(0)?,
                publisher: WsId(r.get(1)?),
                alias: r.get(2)?,
                mydb_name: r.get(3)?,
                table: r.get(4)?,
                published_at: Timestamp(r.get(5)?),
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Groups a publisher's table is currently published to.
    pub fn publications_of(&self, publisher: WsId, table: &str) -> Result<Vec<String>> {
        let mut stmt = self.conn.prepare(
            "SELECT group_id FROM published_tables WHERE publisher = ?1 AND table_name = ?2 ORDER BY group_id",
        )?;
        let rows = stmt.query_map(params![publisher.0, table], |r| r.get(0))?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    // ---- MyDB table bookkeeping ----

    /// Records `table`'s creation time unless one is already known; returns
    /// the recorded time.
    pub fn note_table(&self, mydb_name: &str, table: &str, at: Timestamp) -> Result<Timestamp> {
        self.conn.execute(
            "INSERT OR IGNORE INTO mydb_tables (mydb_name, table_name, created_at) VALUES (?1, ?2, ?3)",
            params![mydb_name, table, at.0],
        )?;
        let t: i64 = self.conn.query_row(
            "SELECT created_at FROM mydb_tables WHERE mydb_name = ?1 AND table_name = ?2",
            params![mydb_name, table],
            |r| r.get(0),
        )?;
        Ok(Timestamp(t))
    }

    pub fn forget_table(&self, mydb_name: &str, table: &str) -> Result<()> {
        self.conn.execute(
            "DELETE FROM mydb_tables WHERE mydb_name = ?1 AND table_name = ?2",
            params![mydb_name, table],
        )?;
        Ok(())
    }

    // ---- screening rules ----

    pub fn rules(&self) -> Result<Vec<ScreenRule>> {
        let mut stmt = self
            .conn
            .prepare("SELECT rule_id, pattern, message FROM screen_rules ORDER BY rule_id")?;
        let rows = stmt.query_map([], |r| {
            Ok(ScreenRule { rule_id: r.get(0)?, pattern: r.get(1)?, message: r.get(2)? })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Replaces the rule table. Every pattern must compile.
    pub fn replace_rules(&self, rules: &[ScreenRule]) -> Result<()> {
        for r in rules {
            screen::compile(r)?;
        }
        self.conn.execute("DELETE FROM screen_rules", [])?;
        for r in rules {
            self.conn.execute(
                "INSERT INTO screen_rules (rule_id, pattern, message) VALUES (?1, ?2, ?3)",
                params![r.rule_id, r.pattern, r.message],
            )?;
        }
        Ok(())
    }

    // ---- jobs ----

    pub fn insert_job(&self, j: &NewJob) -> Result<JobId> {
        self.conn.execute(
            "INSERT INTO jobs (user_id, queue_id, target_id, context, job_kind, query_text, rewritten_text, \
             dest_table, format, state, t_submitted) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, 'Ready', ?10)",
            params![
                j.user_id.0,
                j.queue_id,
                j.target_id.0,
                j.context,
                j.job_kind.as_str(),
                j.query_text,
                j.rewritten_text,
                j.dest_table,
                j.format.map(|f| f.as_str()),
                j.t_submitted.0
            ],
        )?;
        Ok(JobId(self.conn.last_insert_rowid()))
    }

    pub fn job(&self, id: JobId) -> Result<JobRecord> {
        self.conn
            .query_row(&format!("SELECT {JOB_COLUMNS} FROM jobs WHERE job_id = ?1"), [id.0], job_from_row)
            .optional()?
            .ok_or(Error::UnknownJob(id.0))
    }

    /// The caller's jobs, newest first.
    pub fn list_jobs(&self, user: WsId, filter: &JobFilter) -> Result<Vec<JobRecord>> {
        self.user(user)?;
        let mut stmt = self.conn.prepare(&format!(
            "SELECT {JOB_COLUMNS} FROM jobs WHERE user_id = ?1 \
             AND (?2 IS NULL OR state = ?2) AND (?3 IS NULL OR job_kind = ?3) \
             AND (?4 IS NULL OR t_submitted >= ?4) AND (?5 IS NULL OR t_submitted <= ?5) \
             ORDER BY t_submitted DESC, job_id DESC"
        ))?;
        let rows = stmt.query_map(
            params![
                user.0,
                filter.state.map(|s| s.as_str()),
                filter.kind.map(|k| k.as_str()),
                filter.since.map(|t| t.0),
                filter.until.map(|t| t.0)
            ],
            job_from_row,
        )?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Jobs in `state`, oldest submission first, optionally limited to one
    /// target and kind.
    pub fn jobs_in_state(
        &self,
        state: JobState,
        target: Option<TargetId>,
        kind: Option<JobKind>,
    ) -> Result<Vec<JobRecord>> {
        let mut stmt = self.conn.prepare(&format!(
            "SELECT {JOB_COLUMNS} FROM jobs WHERE state = ?1 AND (?2 IS NULL OR target_id = ?2) \
             AND (?3 IS NULL OR job_kind = ?3) ORDER BY t_submitted, job_id"
        ))?;
        let rows = stmt.query_map(
            params![state.as_str(), target.map(|t| t.0), kind.map(|k| k.as_str())],
            job_from_row,
        )?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Applies `event` with compare-and-set on the current state.
    ///
    /// `note` becomes `error_msg` for Fail (required) and Cancel; Complete
    /// clears it. A concurrent transition that got there first yields
    /// [`Error::StaleState`].
    pub fn transition(
        &self,
        id: JobId,
        event: JobEvent,
        now: Timestamp,
        note: Option<&str>,
    ) -> Result<JobRecord> {
        let current = self.job(id)?;
        let mut next = current.transition(event, now)?;
        match event {
            JobEvent::Complete => next.error_msg = None,
            JobEvent::Fail => next.error_msg = Some(note.unwrap_or("failed").to_string()),
            JobEvent::Cancel => next.error_msg = note.map(str::to_string),
            JobEvent::Start => {}
        }
        let n = self.conn.execute(
            "UPDATE jobs SET state = ?3, t_started = ?4, t_finished = ?5, error_msg = ?6 \
             WHERE job_id = ?1 AND state = ?2",
            params![
                id.0,
                current.state.as_str(),
                next.state.as_str(),
                next.t_started.map(|t| t.0),
                next.t_finished.map(|t| t.0),
                next.error_msg
            ],
        )?;
        if n != 1 {
            return Err(Error::StaleState(id.0));
        }
        Ok(next)
    }

    /// Raises `rows_out`; never lowers it.
    pub fn set_rows_out(&self, id: JobId, rows: i64) -> Result<()> {
        self.conn.execute(
            "UPDATE jobs SET rows_out = ?2 WHERE job_id = ?1 AND rows_out <= ?2",
            params![id.0, rows],
        )?;
        Ok(())
    }

    pub fn set_cancel_requested(&self, id: JobId) -> Result<()> {
        self.conn
            .execute("UPDATE jobs SET cancel_requested = 1 WHERE job_id = ?1", [id.0])?;
        Ok(())
    }

    pub fn set_route(&self, id: JobId, route: &str) -> Result<()> {
        self.conn
            .execute("UPDATE jobs SET exec_route = ?2 WHERE job_id = ?1", params![id.0, route])?;
        Ok(())
    }

    pub fn set_output_url(&self, id: JobId, url: &str) -> Result<()> {
        self.conn
            .execute("UPDATE jobs SET output_url = ?2 WHERE job_id = ?1", params![id.0, url])?;
        Ok(())
    }

    /// Terminal jobs whose owner has not been notified yet.
    pub fn unnotified_terminal(&self) -> Result<Vec<JobRecord>> {
        let mut stmt = self.conn.prepare(&format!(
            "SELECT {JOB_COLUMNS} FROM jobs WHERE notified = 0 \
             AND state IN ('Finished', 'Failed', 'Canceled') ORDER BY t_finished, job_id"
        ))?;
        let rows = stmt.query_map([], job_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn mark_notified(&self, id: JobId) -> Result<()> {
        self.conn.execute("UPDATE jobs SET notified = 1 WHERE job_id = ?1", [id.0])?;
        Ok(())
    }

    // ---- export files ----

    pub fn insert_export(&self, f: &ExportFile) -> Result<()> {
        self.conn.execute(
            "INSERT INTO exports (token, job_id, path, created_at, purged) VALUES (?1, ?2, ?3, ?4, 0)",
            params![f.token, f.job_id.0, f.path.to_string_lossy(), f.created_at.0],
        )?;
        Ok(())
    }

    pub fn export_by_token(&self, token: &str) -> Result<ExportFile> {
        self.conn
            .query_row(
                "SELECT token, job_id, path, created_at, purged FROM exports WHERE token = ?1",
                [token],
                export_from_row,
            )
            .optional()?
            .ok_or(Error::UnknownToken)
    }

    pub fn exports(&self) -> Result<Vec<ExportFile>> {
        let mut stmt = self
            .conn
            .prepare("SELECT token, job_id, path, created_at, purged FROM exports ORDER BY created_at")?;
        let rows = stmt.query_map([], export_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn mark_export_purged(&self, token: &str) -> Result<()> {
        self.conn.execute("UPDATE exports SET purged = 1 WHERE token = ?1", [token])?;
        Ok(())
    }

    // ---- statistics ----

    pub fn record_stat(&self, s: &QueryStat) -> Result<()> {
        self.conn.execute(
            "INSERT OR REPLACE INTO query_stats (job_id, elapsed_s, rows, cpu_s, t_finished) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![s.job_id.0, s.elapsed_s, s.rows, s.cpu_s, s.t_finished.0],
        )?;
        Ok(())
    }

    pub fn stats(&self) -> Result<Vec<QueryStat>> {
        let mut stmt = self.conn.prepare(
            "SELECT job_id, elapsed_s, rows, cpu_s, t_finished FROM query_stats ORDER BY t_finished, job_id",
        )?;
        let rows = stmt.query_map([], |r| {
            Ok(QueryStat {
                job_id: JobId(r.get(0)?),
                elapsed_s: r.get(1)?,
                rows: r.get(2)?,
                cpu_s: r.get(3)?,
                t_finished: Timestamp(r.get(4)?),
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }
}

fn export_from_row(r: &Row<'_>) -> rusqlite::Result<ExportFile> {
    Ok(ExportFile {
        token: r.get(0)?,
        job_id: JobId(r.get(1)?),
        path: PathBuf::from(r.get::<_, String>(2)?),
        created_at: Timestamp(r.get(3)?),
        purged: r.get(4)?,
    })
}

/// `[A-Za-z_][A-Za-z0-9_]*`
pub fn is_plain_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
