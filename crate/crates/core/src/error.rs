use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("state error: {0}")]
    State(String),
    #[error("infeasible orthogonality: {0}")]
    InfeasibleOrthogonality(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("round error: {0}")]
    Round(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("resume error: {0}")]
    Resume(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
