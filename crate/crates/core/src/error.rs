//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by simulator operations.
#[derive(Error, Debug)]
pub enum Error {
    /// Input violated a documented precondition or invariant.
    #[error("validation: {0}")]
    Validation(String),

    /// Problem size exceeds a hard capacity guard (e.g. exhaustive search).
    #[error("capacity: {0}")]
    Capacity(String),

    /// A computation produced a non-finite value where one is not allowed.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Underlying I/O failure while loading data.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file.
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
