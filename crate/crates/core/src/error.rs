//! Engine-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("angular metric is undefined for zero vectors")]
    ZeroVector,

    #[error("unknown channel: {0}")]
    UnknownChannel(String),

    #[error("channel {channel} trimmed below offset {base}")]
    LogTrimmed { channel: String, base: u64 },

    #[error("unknown collection: {0}")]
    UnknownCollection(String),

    #[error("collection already exists: {0}")]
    CollectionExists(String),

    #[error("unknown primary key: {0}")]
    UnknownPk(String),

    #[error("duplicate primary key: {0}")]
    DuplicatePk(String),

    #[error("schema violations: {}", .0.join("; "))]
    SchemaViolation(Vec<String>),

    #[error("filter error: {0}")]
    Filter(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("hash ring is empty")]
    EmptyRing,

    #[error("history expired: no retained checkpoint/log covers timestamp {0}")]
    HistoryExpired(crate::hlc::HlcTimestamp),

    #[error("no restored snapshot for collection {collection} at travel timestamp {ts}")]
    NoSnapshot { collection: String, ts: crate::hlc::HlcTimestamp },

    #[error("collection unavailable: {0}")]
    Unavailable(String),

    #[error("query timed out waiting for nodes {nodes:?}; partial coverage, no result returned")]
    PartialCoverage { nodes: Vec<u64> },

    #[error("object not found: {0}")]
    ObjectMissing(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("node {0} not found")]
    UnknownNode(u64),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;
