//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch in {context}: expected {expected}, found {found}")]
    GridMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("numerical divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn grid_mismatch(
        context: &'static str,
        expected: &crate::GridSpec,
        found: &crate::GridSpec,
    ) -> Self {
        Error::GridMismatch {
            context,
            expected: format!("{expected}"),
            found: format!("{found}"),
        }
    }
}
