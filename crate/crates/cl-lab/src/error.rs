//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid scalar parameter (temperature, learning rate, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Invalid input data (labels out of range, empty spectra, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite values or other numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse (backward on a non-scalar, missing task routing, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed on-disk data; carries the byte offset where parsing failed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Downloaded content did not match its pinned digest.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Network failure while fetching a dataset; retryable.
    #[error("fetch error: {0}")]
    Fetch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable process exit code per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) => 2,
            Error::Parameter(_) => 3,
            Error::Input(_) => 4,
            Error::Numeric(_) => 5,
            Error::Usage(_) => 6,
            Error::Parse { .. } => 7,
            Error::Config(_) => 8,
            Error::Integrity(_) => 9,
            Error::Fetch(_) => 10,
            Error::Io(_) => 11,
        }
    }
}
