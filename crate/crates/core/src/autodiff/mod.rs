//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] then sweeps the
//! node list in reverse. Only the operators needed by the segmentation network and
//! its losses exist. Every operator checks its output for NaN/Inf.

mod graph;
mod kernels;
mod tensor;

pub mod gradcheck;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward needs a one-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}
