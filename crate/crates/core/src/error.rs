use std::io;

use thiserror::Error;

/// Errors produced anywhere in the decoding, training and benchmarking stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sequence of {requested} positions exceeds max_seq {max_seq}")]
    Capacity { requested: usize, max_seq: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("dimension mismatch for {name}: expected {expected:?}, found {found:?}")]
    Dimension {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite loss {loss} at step {step}: {diagnostics}")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        diagnostics: String,
    },
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
