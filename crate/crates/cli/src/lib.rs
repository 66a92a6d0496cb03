//! Training harness, evaluation metrics, and the `vcmr` command-line tool.
//!
//! The library half hosts everything the binary needs in testable form: the
//! run configuration, the deterministic training loop, IoU/recall metrics,
//! and the split-evaluation pipeline that turns a trained model plus an
//! encoded corpus into an [`metrics::EvalReport`].

use thiserror::Error;

pub mod config;
pub mod diagnostics;
pub mod eval;
pub mod metrics;
pub mod trainer;

pub use config::{Gates, RunConfig};
pub use diagnostics::{full_loss_grad_check, GradCheckSummary};
pub use eval::{evaluate_split, run_queries, EvalParams};
pub use metrics::{recall_moment, recall_vr, temporal_iou, EvalReport, Task};
pub use trainer::{train, TrainOutcome};

// ------------------------------------------------------------------ errors

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] vcmr_engine::EngineError),
    #[error(transparent)]
    Model(#[from] vcmr_model::ModelError),
    #[error(transparent)]
    Tensor(#[from] vcmr_tensor::TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {detail}")]
    Config { detail: String },
    #[error("invalid data: {detail}")]
    Data { detail: String },
}

impl CliError {
    pub(crate) fn config(detail: impl Into<String>) -> Self {
        CliError::Config { detail: detail.into() }
    }

    pub(crate) fn data(detail: impl Into<String>) -> Self {
        CliError::Data { detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
