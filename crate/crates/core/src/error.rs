//! Crate-wide error type.
//!
//! Variants split along the CLI exit-code boundary: configuration and input
//! validation problems exit with code 2, runtime failures with code 1.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor-op shape/argument mismatch. Internal once inputs are validated.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// Tape misuse: backward on a non-scalar, or on an already-spent tape.
    #[error("tape: {0}")]
    Tape(String),

    /// Bad configuration value or inconsistent config combination.
    #[error("config: {0}")]
    Config(String),

    /// Malformed input file. `offset` is the byte position for binary
    /// formats; text formats put line numbers in `detail`.
    #[error("{path}: {detail}{}", offset.map(|o| format!(" (byte {o})")).unwrap_or_default())]
    Format {
        path: String,
        offset: Option<u64>,
        detail: String,
    },

    /// Invalid user input that is not tied to one file, e.g. mismatched
    /// prediction/label sets or a bad CLI argument.
    #[error("{0}")]
    Invalid(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training failure, e.g. the loss went non-finite.
    #[error("training: {0}")]
    Train(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl std::fmt::Display, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            offset: None,
            detail: detail.into(),
        }
    }

    pub fn format_at(path: impl std::fmt::Display, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            offset: Some(offset),
            detail: detail.into(),
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format { .. } | Error::Invalid(_) => 2,
            Error::Shape { .. } | Error::Tape(_) | Error::Io { .. } | Error::Train(_) => 1,
        }
    }
}
