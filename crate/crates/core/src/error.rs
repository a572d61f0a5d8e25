use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// Malformed PGM header or payload. `field` names the offending part.
    #[error("PGM parse error in {field}: {message}")]
    Parse {
        field: &'static str,
        message: String,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("coordinate error: {0}")]
    Coordinate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{0}")]
    Clustering(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("usage error: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn parse(field: &'static str, message: impl Into<String>) -> Self {
        Error::Parse {
            field,
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failure during
    /// computation. The CLI maps these to exit status 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_) | Error::Coordinate(_) | Error::Config(_) | Error::Usage(_)
        )
    }
}
