//! Dense tensors and a small reverse-mode autodiff engine.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::{matmul, softmax_cols, softplus_scalar, ColumnMask, Tensor};
