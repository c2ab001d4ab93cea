//! Dense `f64` tensors, the handful of kernels a spiking vision network
//! needs, and a tape-based reverse-mode autodiff over them.

mod error;
mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{finite_diff_grad, grad_mismatch};
pub use graph::{BatchStats, CustomOp, Graph, Var, BN_EPS};
pub use ops::{Conv2dSpec, Pool2dSpec};
pub use tensor::Tensor;
