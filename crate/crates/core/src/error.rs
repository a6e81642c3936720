use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("sequence length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed file {path}: {msg}")]
    File { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("enumeration refused: trajectory space of {size} exceeds {limit}")]
    SpaceTooLarge { size: u128, limit: u128 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
