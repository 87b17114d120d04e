//! Error type shared by every module.

use std::path::PathBuf;

/// Everything that can go wrong in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension {0}: need at least {1}")]
    InvalidDimension(usize, usize),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("unknown symbol or tag `{0}`")]
    UnknownSymbol(String),

    #[error("unknown token `{0}` in prompt")]
    UnknownToken(String),

    #[error("division by zero in {0}")]
    ZeroDivisor(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("malformed {kind} data: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("resource budget exceeded: {0}")]
    Budget(String),

    #[error("training diverged at epoch {epoch}; the last finite decoder is attached")]
    Diverged { epoch: usize, checkpoint: Box<crate::probe::LinearMap> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { kind, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
