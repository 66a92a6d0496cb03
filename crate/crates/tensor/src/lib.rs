//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! The building blocks are deliberately small:
//!
//! * [`Tensor`] — a dense value with a shape, generic over [`Scalar`]
//!   (`f32` for training and inference, `f64` for gradient checking).
//! * [`Graph`] — a tape recording one forward pass. Every operation appends a
//!   node; [`Graph::backward`] walks the tape once in reverse and accumulates
//!   gradients additively across fan-out. A graph can be differentiated at
//!   most once.
//! * [`AdamW`] — decoupled weight decay with bias-corrected moments and a
//!   linear warmup schedule.
//! * [`checkpoint`] — a small binary container for named parameter records.
//!
//! All computation is single-threaded and deterministic: the same inputs and
//! seeds produce bitwise-identical values and gradients.

pub mod adamw;
pub mod checkpoint;
pub mod grad_check;
pub mod graph;
mod kernels;
pub mod seed;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use grad_check::{gradient_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};

/// Errors produced by tensor construction, graph operations, the optimizer
/// and the checkpoint container.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    /// Operand shapes do not fit the operation.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// A structurally valid input lies outside the operation's domain
    /// (e.g. a softmax over zero unmasked entries).
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    /// A configuration value is invalid (e.g. an even convolution width).
    #[error("{op}: invalid configuration: {detail}")]
    Config { op: &'static str, detail: String },
    /// An operation produced NaN or infinity; values must stay finite after
    /// every forward and backward pass.
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    /// The API was driven incorrectly (e.g. a second backward pass over a
    /// consumed graph).
    #[error("usage error: {0}")]
    Usage(String),
    /// A byte stream does not parse as the expected container format.
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
