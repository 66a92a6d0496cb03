//! Corpus tooling and the two-stage retrieval engine.
//!
//! This crate owns everything around the model: synthetic corpus generation
//! with a planted, verifiable signal; binary feature/annotation formats; batch
//! assembly with in-batch negatives; the persisted corpus index; top-K video
//! retrieval plus span localization on plain `f32` buffers (no autodiff graph
//! in the serving path); and a latency benchmark comparing the precomputed
//! index against per-pair re-encoding.

pub mod batch;
pub mod bench;
pub mod data;
pub mod formats;
pub mod index;
pub mod retrieval;

pub use batch::{make_batches, TrainingBatch};
pub use data::{
    generate_synthetic_corpus, time_to_index, Corpus, GeneratedCorpus, QueryAnnotation, Splits,
    SyntheticSpec, VideoRecord,
};
pub use index::{build_corpus_index, CorpusIndex, IndexEntry};
pub use retrieval::{localize_moments, retrieve_videos, vcmr_rank, MomentPrediction, QueryVectors};

/// Errors surfaced by corpus generation, file formats, indexing, and
/// retrieval.
#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Tensor(#[from] vcmr_tensor::TensorError),

    #[error(transparent)]
    Model(#[from] vcmr_model::ModelError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {detail}")]
    Config { detail: String },

    #[error("invalid data: {detail}")]
    Data { detail: String },
}

impl EngineError {
    pub(crate) fn config(detail: impl Into<String>) -> Self {
        EngineError::Config { detail: detail.into() }
    }

    pub(crate) fn data(detail: impl Into<String>) -> Self {
        EngineError::Data { detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;
