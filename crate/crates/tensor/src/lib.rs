//! Dense 64-bit tensors with a tape for reverse-mode differentiation.
//!
//! The engine is intentionally small: row-major storage, a handful of ops
//! needed by attention/MoE policies, and no broadcasting other than a bias
//! row or a weight matrix shared across leading batch axes.

mod backward;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, BlockError, GradCheckReport};
pub use graph::{Graph, Var, INSTANCE_NORM_EPS};
pub use tensor::{numel, ParamGrads, ParamId, ParamSet, Tensor};
