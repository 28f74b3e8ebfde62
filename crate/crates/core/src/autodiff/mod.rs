//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass over [`Tensor`] values; parameters
//! live in a [`ParamStore`] and enter a graph as gradient-tracking leaves.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
}
