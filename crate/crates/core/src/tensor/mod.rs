//! Dense tensors and a reverse-mode gradient tape.
//!
//! The tape supports exactly the operations the model and its losses need.
//! Every op has a hand-written backward pass, checked against central finite
//! differences in [`gradcheck`]. Broadcasting is limited to adding or
//! multiplying a tensor whose shape is a trailing suffix of the other
//! operand's shape; every other shape mismatch is an error.

mod array;
mod attention;
mod element;
pub mod gradcheck;
mod graph;

use thiserror::Error;

pub use array::Tensor;
pub use element::Element;
pub use gradcheck::{finite_diff_check, GradCheckError, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var};

pub(crate) use graph::argmax_first;


#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }

    pub(crate) fn invalid(op: &'static str, detail: String) -> Self {
        Self::Invalid { op, detail }
    }
}
