//! Dense `f64` arrays, reverse-mode differentiation, SGD and checkpoints.
//!
//! Differentiable code builds a [`Graph`] per forward pass. The free functions
//! here evaluate a single op without keeping the tape around.

pub mod checkpoint;
mod graph;
pub(crate) mod kernels;
mod sgd;
mod tensor;

pub use graph::{bce_term, sigmoid, softmax_in_place, Gradients, Graph, Var};
pub use sgd::{sgd_step, Sgd, SgdConfig};
pub use tensor::Tensor;

use crate::error::Result;

fn unary(input: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = f(&mut g, x)?;
    Ok(g.value(y).clone())
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let w = g.input(kernel.clone());
    let y = g.conv2d(x, w, stride, padding)?;
    Ok(g.value(y).clone())
}

pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    unary(input, |g, x| g.global_average_pool(x))
}

pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    unary(input, |g, x| g.max_pool2d(x, kernel, stride))
}

pub fn relu(input: &Tensor) -> Tensor {
    unary(input, |g, x| Ok(g.relu(x))).expect("relu is total")
}

pub fn softmax_rows(input: &Tensor) -> Result<Tensor> {
    unary(input, |g, x| g.softmax_rows(x))
}

pub fn binary_cross_entropy_with_logits(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    unary(logits, |g, z| g.bce_with_logits(z, targets)).map(|t| t.item())
}
