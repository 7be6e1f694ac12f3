//! Tape-based reverse-mode autodiff over dense row-major tensors.
//!
//! The differentiable surface is deliberately small: exactly the kernels the
//! avatar model needs, each with a hand-derived backward. A [`tape::Tape`]
//! records one forward graph; [`tape::Tape::backward`] walks it once in
//! reverse and accumulates per-node gradients. There is no graph reuse —
//! training builds a fresh tape every iteration.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{CsrPair, Gradients, Op, Tape, ValId};
pub use tensor::Tensor;

/// Errors raised while building a graph. Every op validates its operand
/// shapes up front and reports the offending dimensions.
#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

impl DiffError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::Shape { op, detail: detail.into() }
    }
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        DiffError::Invalid { op, msg: msg.into() }
    }
}
