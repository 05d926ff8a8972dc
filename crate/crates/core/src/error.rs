use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("{op}: value {value} outside {range}")]
    OutOfRange {
        op: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("malformed datapoint: {0}")]
    Malformed(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, minibatch {minibatch}")]
    Diverged { epoch: usize, minibatch: usize },

    #[error("stale trace: {0}")]
    StaleTrace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(op: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::DimensionMismatch {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
