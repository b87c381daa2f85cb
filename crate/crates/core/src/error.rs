use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("catalog: {0}")]
    Catalog(String),
    #[error("out-of-order event id: expected {expected}, got {got}")]
    EventOrder { expected: u64, got: u64 },
    #[error("unknown user '{0}'")]
    UnknownUser(String),
    #[error("unknown image '{0}'")]
    UnknownImage(String),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("events mix user/image pairs")]
    MixedPair,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("no candidates left to recommend")]
    EmptyCandidates,
    #[error("need at least {need} non-empty profiles, got {got}")]
    TooFewProfiles { need: usize, got: usize },
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("zero-length session")]
    ZeroLengthSession,
    #[error("user '{0}' has no cluster assignment")]
    Unassigned(String),
    #[error("log format: {0}")]
    LogFormat(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
