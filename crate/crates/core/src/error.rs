use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has zero norm")]
    ZeroVector,

    #[error("vector contains a non-finite component")]
    NonFinite,

    #[error("vector is empty")]
    EmptyVector,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("record {id:?}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("no records given")]
    NoRecords,

    #[error("store is empty")]
    EmptyStore,

    #[error("corrupt store header: {0}")]
    CorruptHeader(String),

    #[error("header declares {header} entries but metadata has {rows}")]
    CountMismatch { header: u64, rows: u64 },

    #[error("entry {id:?} is not unit norm (norm {norm})")]
    NotUnitNorm { id: String, norm: f64 },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),

    #[error("projected sum is degenerate (norm {0:e})")]
    DegenerateSum(f64),

    #[error("neither datastore nor similar captions available to decode from")]
    NoSource,

    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable { attempts: u32, reason: String },

    #[error("backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    #[error("malformed backend response: {0}")]
    MalformedResponse(String),

    #[error("no transcript record for request {0:?}")]
    TranscriptMiss(String),

    #[error("no ground truth for item {0:?}")]
    MissingGroundTruth(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn record(id: impl Into<String>, source: Error) -> Self {
        Error::Record {
            id: id.into(),
            source: Box::new(source),
        }
    }

    /// True for failures of the generation backend (as opposed to bad input).
    pub fn is_backend(&self) -> bool {
        match self {
            Error::BackendUnavailable { .. }
            | Error::Timeout { .. }
            | Error::MalformedResponse(_)
            | Error::TranscriptMiss(_) => true,
            Error::Record { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}
