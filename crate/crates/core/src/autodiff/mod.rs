//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Everything the particle transformer, its training loss and the SGLD
//! gradients need: a handful of primitives ([`Op`]), an eagerly evaluated
//! [`Graph`] that records them, [`Graph::backward`] for gradients and
//! [`grad_check`] to verify those gradients against central differences.
//!
//! Tensors are `f32` for training and sampling; `f64` graphs are used for
//! verification.

mod check;
mod graph;
mod ops;
mod tensor;

pub use check::{grad_check, GradCheckOffender, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{eval_primitive, Op, LAYER_NORM_EPS};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: input {input} contains non-finite values")]
    NonFinite { op: &'static str, input: usize },
    #[error("shape {shape:?} does not match {len} data values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}
