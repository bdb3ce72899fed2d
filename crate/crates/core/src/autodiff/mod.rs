//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gemm;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{check_gradient, numeric_gradient, relative_error};
pub use graph::{Graph, OpAttrs, OpKind, Var};
pub use kernels::Conv1dAttrs;
pub use tensor::Tensor;
