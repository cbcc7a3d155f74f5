//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Ops are methods on [`Graph`]: each one computes its value eagerly and
//! records a backward rule. Parameters live in a [`ParamStore`] outside any
//! graph, so one store can feed many independent graphs (one per example,
//! possibly on different threads) and their gradients can be reduced
//! afterwards.
//!
//! ```
//! use furcanet::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.variable(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let loss = g.dot(w, w).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod gradcheck;
mod graph;
mod params;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_with, Discrepancy, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{len} values cannot fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}

#[cfg(test)]
mod tests;
