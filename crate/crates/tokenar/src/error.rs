//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by any tokenar operation.
#[derive(Debug, Error)]
pub enum TokenArError {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// File or directory I/O failed.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents are malformed.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A numeric computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A checkpoint does not match the model configuration.
    #[error("version error: checkpoint {checkpoint} incompatible with config {config}")]
    CheckpointMismatch { checkpoint: String, config: String },
}

pub type Result<T> = std::result::Result<T, TokenArError>;

impl TokenArError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        TokenArError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TokenArError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        TokenArError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input (config, arguments, missing
    /// or corrupt input files) rather than a failure at run time. The CLI
    /// maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            TokenArError::InvalidArgument(_)
                | TokenArError::Format { .. }
                | TokenArError::CheckpointMismatch { .. }
        )
    }
}
