use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("posterior cannot be normalized: every cluster has zero weight")]
    DegeneratePosterior,

    #[error("{path}: unsupported library format version {found} (this build reads up to {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: corrupt library file: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("period {period} failed: {source}")]
    Period {
        period: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("run stopped after {completed} completed periods: {message}")]
    RunFailed { completed: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
