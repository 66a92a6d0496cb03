//! Neural model for video corpus moment retrieval: a query encoder, a
//! two-stream (visual + subtitle) video encoder built from co-attentional
//! transformer blocks, and the four training objectives — video-retrieval
//! hinge, moment-localization cross-entropy, video-level NCE, and
//! frame-level Jensen-Shannon mutual information.
//!
//! Parameters live in a flat registry ([`params::ParamSet`]) so they can be
//! checkpointed by name, optimized as a contiguous list, and bound to an
//! autodiff graph either from stored tensors (training/inference) or from
//! slices of one flat vector (finite-difference checking of the full loss).

pub mod blocks;
pub mod config;
pub mod encoders;
pub mod objectives;
pub mod params;
pub mod session;

pub use config::ModelConfig;
pub use encoders::{encode_query, encode_video, EncodedQuery, EncodedVideo};
pub use objectives::{
    frame_cl_loss, ml_distributions, ml_loss, ml_scores, nce_loss, total_loss, video_cl_loss,
    vr_hinge_loss, vr_similarity, LossParts, StreamPairs,
};
pub use params::{Model, ParamId, ParamSet};
pub use session::Session;

use thiserror::Error;

/// Errors produced by model construction, encoding, and loss evaluation.
#[derive(Debug, Error)]
pub enum ModelError {
    /// Propagated tensor-graph failure (shape, domain, numerical).
    #[error(transparent)]
    Tensor(#[from] vcmr_tensor::TensorError),
    /// Invalid configuration or parameter registry misuse.
    #[error("config error: {detail}")]
    Config { detail: String },
    /// Input data violates a documented precondition.
    #[error("data error: {detail}")]
    Data { detail: String },
    /// Checkpoint payload does not match the model skeleton.
    #[error("checkpoint error: {detail}")]
    Checkpoint { detail: String },
}

impl ModelError {
    pub(crate) fn config(detail: impl Into<String>) -> Self {
        ModelError::Config { detail: detail.into() }
    }

    pub(crate) fn data(detail: impl Into<String>) -> Self {
        ModelError::Data { detail: detail.into() }
    }

    pub(crate) fn checkpoint(detail: impl Into<String>) -> Self {
        ModelError::Checkpoint { detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
