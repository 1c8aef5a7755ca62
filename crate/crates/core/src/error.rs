use crate::model::{JobEvent, JobState};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("illegal transition: {event:?} from {from:?}")]
    IllegalTransition { from: JobState, event: JobEvent },
    #[error("job {0} changed state concurrently")]
    StaleState(i64),

    #[error("authentication failed")]
    AuthFailed,
    #[error("unknown user {0}")]
    UnknownUser(i64),
    #[error("unknown job {0}")]
    UnknownJob(i64),
    #[error("unknown target {0}")]
    UnknownTarget(String),
    #[error("unknown queue {0}")]
    UnknownQueue(String),
    #[error("no target serves context {context} in queue {queue}")]
    UnknownContext { context: String, queue: String },
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("unknown download token")]
    UnknownToken,
    #[error("download expired")]
    Gone,

    #[error("context {context} already served in queue {queue}")]
    DuplicateContext { context: String, queue: String },
    #[error("target locator unreachable: {0}")]
    UnreachableLocator(String),
    #[error("target unavailable: {0}")]
    TargetUnavailable(String),
    #[error("no target can host MyDB databases")]
    NoMyDbTarget,
    #[error("invalid: {0}")]
    Invalid(String),

    #[error("rejected by rule {rule_id}: {message}")]
    Rejected { rule_id: i64, message: String },
    #[error("INTO must target MyDB: {0}")]
    MalformedInto(String),
    #[error("queries in queue {0} must write their results INTO MyDB.<table>")]
    MissingInto(String),
    #[error("{0} is not published to any of your groups")]
    NotPublished(String),

    #[error("job {0} does not belong to the caller")]
    NotOwner(i64),
    #[error("not a member of group {0}")]
    NotMember(String),
    #[error("job {0} is already in a terminal state")]
    AlreadyTerminal(i64),

    #[error("table {0} already exists")]
    TableExists(String),
    #[error("MyDB quota of {quota} bytes exceeded")]
    QuotaExceeded { quota: u64 },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("table {0} has no coordinate columns")]
    MissingCoordinates(String),
    #[error("radius {0} arcmin outside (0, 60]")]
    RadiusOutOfRange(f64),

    #[error("quantum exceeded")]
    QuantumExceeded,
    #[error("canceled")]
    Canceled,
    #[error("engine: {0}")]
    Engine(String),

    #[error("query not eligible for a shared scan: {0}")]
    Ineligible(String),
    #[error("rider sink: {0}")]
    Sink(String),

    #[error("histogram input is empty")]
    EmptyInput,
    #[error("need at least 3 nonempty bins, got {0}")]
    DegenerateBins(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<rusqlite::Error> for Error {
    fn from(e: rusqlite::Error) -> Self {
        Error::Engine(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let location = e
            .position()
            .map(|p| format!("line {}", p.line()))
            .unwrap_or_else(|| "input".into());
        Error::Parse {
            location,
            message: e.to_string(),
        }
    }
}

impl Error {
    /// Stable name of the variant, for API error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::IllegalTransition { .. } => "IllegalTransition",
            Error::StaleState(_) => "StaleState",
            Error::AuthFailed => "AuthFailed",
            Error::UnknownUser(_) => "UnknownUser",
            Error::UnknownJob(_) => "UnknownJob",
            Error::UnknownTarget(_) => "UnknownTarget",
            Error::UnknownQueue(_) => "UnknownQueue",
            Error::UnknownContext { .. } => "UnknownContext",
            Error::UnknownGroup(_) => "UnknownGroup",
            Error::UnknownTable(_) => "UnknownTable",
            Error::UnknownToken => "UnknownToken",
            Error::Gone => "Gone",
            Error::DuplicateContext { .. } => "DuplicateContext",
            Error::UnreachableLocator(_) => "UnreachableLocator",
            Error::TargetUnavailable(_) => "TargetUnavailable",
            Error::NoMyDbTarget => "NoMyDbTarget",
            Error::Invalid(_) => "Invalid",
            Error::Rejected { .. } => "Rejected",
            Error::MalformedInto(_) => "MalformedInto",
            Error::MissingInto(_) => "MissingInto",
            Error::NotPublished(_) => "NotPublished",
            Error::NotOwner(_) => "NotOwner",
            Error::NotMember(_) => "NotMember",
            Error::AlreadyTerminal(_) => "AlreadyTerminal",
            Error::TableExists(_) => "TableExists",
            Error::QuotaExceeded { .. } => "QuotaExceeded",
            Error::Parse { .. } => "Parse",
            Error::MissingCoordinates(_) => "MissingCoordinates",
            Error::RadiusOutOfRange(_) => "RadiusOutOfRange",
            Error::QuantumExceeded => "QuantumExceeded",
            Error::Canceled => "Canceled",
            Error::Engine(_) => "Engine",
            Error::Ineligible(_) => "Ineligible",
            Error::Sink(_) => "Sink",
            Error::EmptyInput => "EmptyInput",
            Error::DegenerateBins(_) => "DegenerateBins",
            Error::Io(_) => "Io",
        }
    }
}
