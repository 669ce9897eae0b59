use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CatError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CatError::InvalidArgument(msg.into()))
}
