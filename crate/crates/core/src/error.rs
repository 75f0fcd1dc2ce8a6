use thiserror::Error;
use vrpmoe_tensor::TensorError;

use crate::env::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("degenerate instance: {0}")]
    Degenerate(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("invalid tour: {0}")]
    Invalid(Violation),

    #[error("{solver} refuses n = {n} (limit {limit})")]
    TooLarge {
        solver: &'static str,
        n: usize,
        limit: usize,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}; instance seeds {seeds:?}")]
    NonFiniteLoss { epoch: usize, batch: usize, seeds: Vec<u64> },
}

pub type Result<T> = std::result::Result<T, Error>;
