//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LapError>;

#[derive(Debug, Error)]
pub enum LapError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not match the expected format.
    #[error("{path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    /// A precondition on an argument or configuration was violated.
    #[error("{0}")]
    InvalidInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The requested quantity is undefined on this input (e.g. AUC with a
    /// single class present).
    #[error("{0}")]
    Degenerate(String),
}

impl LapError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LapError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        LapError::MalformedFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn dims(what: impl Into<String>, expected: usize, got: usize) -> Self {
        LapError::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        LapError::InvalidInput(msg.into())
    }
}
