//! Crate-wide error type with a stable mapping to process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor/sequence shape did not match what an operation expects.
    #[error("{op}: shape mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: String,
        expected: String,
        got: String,
    },

    /// An operation produced or received NaN/Inf. Never silent.
    #[error("non-finite value in {op}")]
    NonFinite { op: String },

    /// Invalid argument, configuration, or precondition violation.
    #[error("{0}")]
    Invalid(String),

    /// A file did not conform to an on-disk format (bad magic, truncation, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn shape(op: &str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn non_finite(op: &str) -> Self {
        Error::NonFinite { op: op.to_string() }
    }

    /// Exit code contract: 0 success, 1 validation error, 2 numerical
    /// failure, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. } | Error::Invalid(_) => 1,
            Error::NonFinite { .. } => 2,
            Error::Format(_) | Error::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
