use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("backward called without a matching forward cache")]
    MissingCache,

    /// Non-finite values showed up in a loss, target or gradient.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("dataset file {path}: {kind}")]
    Dataset { path: PathBuf, kind: DatasetError },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatasetError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("{field} is {got} but environment `{env_id}` expects {expected}")]
    DimensionMismatch {
        env_id: String,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("truncated: expected {expected} bytes of records, found {found}")]
    Truncated { expected: u64, found: u64 },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Short machine-parsable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Contract(_) | Error::DimensionMismatch { .. } | Error::MissingCache => {
                "contract"
            }
            Error::Divergence(_) => "divergence",
            Error::Config { .. } => "config",
            Error::Dataset { .. } => "dataset",
            Error::Checkpoint(_) | Error::Json(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}
