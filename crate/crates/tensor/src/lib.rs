//! Dense `N, C, H, W` tensors with a tape-based reverse-mode autograd.
//!
//! Forward operations are methods on [`Graph`]; each returns a [`Var`]
//! handle. [`Graph::backward`] produces [`Gradients`] for every leaf that
//! requires them. Values are 32- or 64-bit floats via the [`Scalar`] trait.

mod backward;
pub mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod scalar;
mod tensor;

pub use backward::Gradients;
pub use error::{Result, TensorError};
pub use gradcheck::{
    grad_check, grad_check_hooked, grad_check_with, op_suite, random_projection, GradCheckConfig, GradCheckReport,
};
pub use graph::{BatchNormMode, Graph, StatUpdate, Var};
pub use kernels::conv::Conv2dParams;
pub use kernels::pool::{Pool2dParams, PoolKind};
pub use scalar::{DType, Scalar};
pub use tensor::{numel, Tensor};
