//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file on disk failed validation (bad magic, truncation, trailing
    /// bytes, hash mismatch).
    #[error("bad file {path}: {reason}")]
    BadFile { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    /// Incompatible array shapes; `context` names the operation.
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    /// Input violates a documented precondition; `context` names the
    /// operation.
    #[error("invalid input to {context}: {detail}")]
    Invalid { context: &'static str, detail: String },
}

impl Error {
    pub fn bad_file(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::BadFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            context,
            detail: detail.into(),
        }
    }

    pub fn invalid(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            context,
            detail: detail.into(),
        }
    }
}
