//! Domain records shared by every subsystem.
//!
//! These are plain values. Everything mutable lives in the administrative
//! database (see [`crate::admin`]); a record read from it is a snapshot.

use std::fmt;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Milliseconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn now() -> Self {
        let ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or(Duration::ZERO)
            .as_millis();
        Timestamp(ms as i64)
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn plus(self, d: Duration) -> Self {
        Timestamp(self.0 + d.as_millis() as i64)
    }

    pub fn plus_secs(self, s: f64) -> Self {
        Timestamp(self.0 + (s * 1000.0).round() as i64)
    }

    /// Seconds elapsed from `earlier` to `self`; negative if `earlier` is later.
    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / 1000.0
    }
}

macro_rules! id_type {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub i64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(JobId);
id_type!(WsId);
id_type!(TargetId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    Ready,
    Started,
    Finished,
    Failed,
    Canceled,
}

impl JobState {
    pub const ALL: [JobState; 5] = [
        JobState::Ready,
        JobState::Started,
        JobState::Finished,
        JobState::Failed,
        JobState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Finished | JobState::Failed | JobState::Canceled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Ready => "Ready",
            JobState::Started => "Started",
            JobState::Finished => "Finished",
            JobState::Failed => "Failed",
            JobState::Canceled => "Canceled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown job state {s:?}")))
    }

    /// The state `event` leads to, or `None` when the move is illegal.
    pub fn apply(self, event: JobEvent) -> Option<JobState> {
        use JobEvent::*;
        use JobState::*;
        match (self, event) {
            (Ready, Start) => Some(Started),
            (Ready, Cancel) => Some(Canceled),
            (Started, Complete) => Some(Finished),
            (Started, Fail) => Some(Failed),
            (Started, Cancel) => Some(Canceled),
            _ => None,
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobEvent {
    Start,
    Complete,
    Fail,
    Cancel,
}

impl JobEvent {
    pub const ALL: [JobEvent; 4] = [
        JobEvent::Start,
        JobEvent::Complete,
        JobEvent::Fail,
        JobEvent::Cancel,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobKind {
    Query,
    Export,
    Import,
}

impl JobKind {
    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::Query => "Query",
            JobKind::Export => "Export",
            JobKind::Import => "Import",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [JobKind::Query, JobKind::Export, JobKind::Import]
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown job kind {s:?}")))
    }
}

/// Export file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    VoTable,
    Json,
}

impl TableFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::VoTable => "votable",
            TableFormat::Json => "json",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::VoTable => "vot.xml",
            TableFormat::Json => "json",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "votable" | "vot" | "xml" => Ok(TableFormat::VoTable),
            "json" => Ok(TableFormat::Json),
            _ => Err(Error::Invalid(format!("unknown table format {s:?}"))),
        }
    }
}

/// One row of the jobs table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub user_id: WsId,
    pub queue_id: String,
    pub target_id: TargetId,
    /// Catalog context the query runs against.
    pub context: String,
    pub job_kind: JobKind,
    pub query_text: String,
    pub rewritten_text: String,
    pub dest_table: Option<String>,
    /// Export format, for Export jobs.
    pub format: Option<TableFormat>,
    pub state: JobState,
    pub t_submitted: Timestamp,
    pub t_started: Option<Timestamp>,
    pub t_finished: Option<Timestamp>,
    pub rows_out: i64,
    pub error_msg: Option<String>,
    pub output_url: Option<String>,
    pub cancel_requested: bool,
    /// How the job was executed ("private" scan or shared "wheel"), once known.
    pub exec_route: Option<String>,
}

impl JobRecord {
    /// Applies `event` at `now`, producing the successor record.
    ///
    /// Terminal timestamps are clamped so they never precede `t_started`.
    pub fn transition(&self, event: JobEvent, now: Timestamp) -> Result<JobRecord> {
        let next = self.state.apply(event).ok_or(Error::IllegalTransition {
            from: self.state,
            event,
        })?;
        let mut out = self.clone();
        out.state = next;
        match next {
            JobState::Started => out.t_started = Some(now.max(self.t_submitted)),
            _ => {
                let floor = self.t_started.unwrap_or(self.t_submitted);
                out.t_finished = Some(now.max(floor));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueMode {
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSpec {
    pub queue_id: String,
    pub quantum_s: f64,
    pub mode: QueueMode,
    pub max_rows: Option<i64>,
}

impl QueueSpec {
    /// The one-minute quick queue with the 100,000-row answer cap.
    pub fn quick() -> Self {
        QueueSpec {
            queue_id: "quick".into(),
            quantum_s: 60.0,
            mode: QueueMode::Sync,
            max_rows: Some(100_000),
        }
    }

    /// A five-hundred-minute batch queue.
    pub fn long() -> Self {
        QueueSpec {
            queue_id: "long".into(),
            quantum_s: 500.0 * 60.0,
            mode: QueueMode::Async,
            max_rows: None,
        }
    }

    pub fn quantum(&self) -> Duration {
        Duration::from_secs_f64(self.quantum_s)
    }
}

/// Checks the queue-set invariants: positive quanta, exactly one Sync queue,
/// and the Sync queue strictly shortest.
pub fn validate_queues(queues: &[QueueSpec]) -> Result<()> {
    if let Some(q) = queues.iter().find(|q| !(q.quantum_s > 0.0)) {
        return Err(Error::Invalid(format!("queue {} has non-positive quantum", q.queue_id)));
    }
    let sync: Vec<_> = queues.iter().filter(|q| q.mode == QueueMode::Sync).collect();
    if sync.len() != 1 {
        return Err(Error::Invalid(format!(
            "exactly one Sync queue required, found {}",
            sync.len()
        )));
    }
    let quick = sync[0];
    if queues
        .iter()
        .any(|q| q.mode == QueueMode::Async && q.quantum_s <= quick.quantum_s)
    {
        return Err(Error::Invalid("the Sync queue must have the smallest quantum".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerTarget {
    pub target_id: TargetId,
    pub name: String,
    /// Directory holding this target's database files.
    pub locator: String,
    pub context_names: Vec<String>,
    pub max_concurrent: u32,
    /// Queues this target serves; empty means all queues.
    #[serde(default)]
    pub queues: Vec<String>,
    /// Whether MyDB databases may be placed here.
    #[serde(default)]
    pub hosts_mydb: bool,
}

impl ServerTarget {
    pub fn serves_queue(&self, queue_id: &str) -> bool {
        self.queues.is_empty() || self.queues.iter().any(|q| q == queue_id)
    }

    pub fn serves_context(&self, context: &str) -> bool {
        self.context_names.iter().any(|c| c.eq_ignore_ascii_case(context))
    }

    /// True when both targets could be chosen for some common queue.
    pub fn shares_queue_with(&self, other: &ServerTarget) -> bool {
        self.queues.is_empty()
            || other.queues.is_empty()
            || self.queues.iter().any(|q| other.queues.contains(q))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub ws_id: WsId,
    #[serde(skip_serializing)]
    pub password_hash: String,
    pub email: Option<String>,
    pub notify: bool,
    pub mydb_name: Option<String>,
    pub mydb_target: Option<TargetId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group_id: String,
    pub name: String,
    pub owner: WsId,
    pub members: Vec<WsId>,
}

impl GroupRecord {
    pub fn has_member(&self, user: WsId) -> bool {
        self.owner == user || self.members.contains(&user)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedTable {
    pub group_id: String,
    pub publisher: WsId,
    pub alias: String,
    pub mydb_name: String,
    pub table: String,
    pub published_at: Timestamp,
}

/// Physical MyDB database name for a user.
pub fn mydb_name_for(ws_id: WsId) -> String {
    format!("mydb_{:06}", ws_id.0)
}
