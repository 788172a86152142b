//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error")]
    Io(#[from] std::io::Error),

    /// A dataset or checkpoint file failed to parse. `line` is 1-based and
    /// refers to the offending line of a JSON-lines file (0 when unknown).
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A value or configuration violated a documented invariant.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Tensor shapes disagree with what the operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity showed up where finite numbers are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint file is corrupt, truncated, or from an unknown format version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss or gradient and was aborted.
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Attach the offending path to an i/o error.
    pub(crate) fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }
}
