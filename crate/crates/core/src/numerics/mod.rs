//! Dense `f64` tensors, reverse-mode autodiff and the layer primitives the
//! backbone is built from.

mod gemm;
pub mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{sigmoid_scalar, Graph, Var};
pub use tensor::Tensor;

/// Elementwise logistic function on a plain tensor.
pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape().to_vec(), |i| sigmoid_scalar(x.data()[i]))
}

/// Elementwise `max(0, x)` on a plain tensor.
pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i].max(0.0))
}
