//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! The engine supports exactly the primitives the cell search space needs.
//! A [`ComputeGraph`] records each op as it runs; [`ComputeGraph::backward`]
//! walks the tape in reverse and returns per-parameter gradients.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;

use thiserror::Error;

use crate::tensor::TensorError;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, FiniteDiffOptions, FiniteDiffReport};
pub use graph::{ComputeGraph, NodeId, Primitive, BN_EPS};
pub use kernels::Window;
pub use params::{sgd_step, Gradients, ModelWeights, ParamEntry, ParamId, ParamStore, Section, SectionFilter};

pub(crate) use graph::softmax_in_place;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("unknown parameter id {}", .0 .0)]
    UnknownParam(ParamId),
    #[error("no gradient for parameter id {}", .0 .0)]
    MissingGradient(ParamId),
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f64),
    #[error("finite-difference epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
