use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} has no unmasked entry (no feasible action)")]
    Infeasible { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("index {index} out of range for extent {extent} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("non-finite value at coordinate {coord} of parameter `{param}`")]
    NonFinite { param: String, coord: usize },

    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
