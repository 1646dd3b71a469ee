use std::fmt;

/// Errors produced by the annotation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("operation not allowed in phase {phase}: {message}")]
    Phase { phase: String, message: String },

    #[error("session is busy training")]
    Busy,

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidParameter(msg.to_string())
    }

    pub(crate) fn parse(line: usize, msg: impl fmt::Display) -> Self {
        Error::Parse {
            line,
            message: msg.to_string(),
        }
    }

    pub(crate) fn format(msg: impl fmt::Display) -> Self {
        Error::Format(msg.to_string())
    }
}
