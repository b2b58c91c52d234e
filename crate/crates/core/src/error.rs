use std::io;

use thiserror::Error;

pub type Result<T, E = TatsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TatsError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parameter audit failed: {0}")]
    Audit(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TatsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TatsError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TatsError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        TatsError::Format {
            kind,
            msg: msg.into(),
        }
    }
}
