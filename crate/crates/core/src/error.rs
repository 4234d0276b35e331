use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum PasclError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, PasclError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(PasclError::InvalidInput(msg.into()))
}
