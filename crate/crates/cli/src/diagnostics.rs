//! Gradient fidelity diagnostics.
//!
//! Runs the complete multi-task training loss through a central-difference
//! gradient check in 64-bit precision. The loss graph comes from the same
//! builder the trainer uses, so a pass here certifies the gradients that
//! drive optimization, not a simplified stand-in. Elements whose ±h
//! evaluations straddle a kink (hinge corner, max switch) are excluded by
//! the checker and reported.

use serde::Serialize;
use vcmr_engine::data::{generate_synthetic_corpus, Corpus, SyntheticSpec};
use vcmr_engine::make_batches;
use vcmr_model::{total_loss, Model, ModelConfig, Session};
use vcmr_tensor::{gradient_check, Graph, TensorError, Var};

use crate::config::RunConfig;
use crate::trainer::build_batch_loss;
use crate::{CliError, Result};

/// Outcome of a full-loss gradient check, serializable for the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    /// Total scalar parameters finite-differenced.
    pub parameters: usize,
    /// Elements compared against central differences.
    pub checked: usize,
    /// Elements excluded for straddling a kink.
    pub excluded: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// A run configuration small enough that every parameter can be
/// finite-differenced in seconds. Two transformer blocks, co-attention,
/// and every objective stay enabled; only the widths shrink.
pub fn small_run_config(seed: u64) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            d: 8,
            d_v: 12,
            d_w: 10,
            heads: 2,
            d_ff: 16,
            n_v_max: 8,
            n_q_max: 6,
            conv_width: 3,
            n_neg: 2,
            seed,
            ..ModelConfig::default()
        },
        seed,
        ..RunConfig::default()
    }
}

/// A corpus matched to [`small_run_config`]: two videos carrying two
/// annotated moments each, so one batch holds four queries with both
/// same-video and cross-video structure.
pub fn small_grad_corpus(seed: u64) -> Result<Corpus> {
    let spec = SyntheticSpec {
        m: 2,
        n_v: (6, 8),
        n_q: (4, 5),
        d_v: 12,
        d_w: 10,
        latent_dim: 12,
        signal_strength: 0.9,
        moments_per_video: (2, 2),
        train_fraction: 1.0,
        seed,
        ..SyntheticSpec::default()
    };
    Ok(generate_synthetic_corpus(&spec)
        .map_err(|e| CliError::Data { detail: e.to_string() })?
        .corpus)
}

/// Default central-difference step. Near the f64 optimum `∛ε ≈ 6e-6` for
/// unit-scale losses: large steps leak O(h²) truncation error into the
/// numerical gradient, tiny steps amplify forward-pass roundoff.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

fn usage<E: std::fmt::Display>(e: E) -> TensorError {
    TensorError::Usage(e.to_string())
}

/// Checks the analytic gradient of the full training loss over one batch
/// drawn from `corpus` against 64-bit central differences with step `h`.
///
/// The batch contains every annotation in the corpus, so keep the corpus
/// tiny: cost scales as two forward passes per scalar parameter.
pub fn full_loss_grad_check(
    cfg: &RunConfig,
    corpus: &Corpus,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckSummary> {
    cfg.validate()?;
    let all: Vec<usize> = (0..corpus.annotations.len()).collect();
    if all.len() < 2 {
        return Err(CliError::config(
            "gradient check needs at least two annotations for in-batch negatives",
        ));
    }
    let batches = make_batches(
        &corpus.annotations,
        &all,
        all.len(),
        cfg.model.n_neg,
        cfg.seed,
        0,
    )
    .map_err(|e| CliError::Data { detail: e.to_string() })?;
    let batch = &batches[0];

    let model: Model<f64> =
        Model::new(cfg.model.clone()).map_err(|e| CliError::Config { detail: e.to_string() })?;
    let point = model.params.flatten();

    let report = gradient_check(
        |g: &mut Graph<f64>, x: Var| {
            let mut s = Session::new(&model, g);
            s.bind_flat(x).map_err(usage)?;
            let built = build_batch_loss(&mut s, cfg, corpus, batch).map_err(usage)?;
            if built.is_empty() {
                return Err(usage("no objective produced a loss term"));
            }
            total_loss(&mut s, &built.parts).map_err(usage)
        },
        &point,
        h,
    )?;

    Ok(GradCheckSummary {
        parameters: point.numel(),
        checked: report.checked,
        excluded: report.excluded,
        max_rel_err: report.max_rel_err,
        worst_analytic: report.worst_pair.0,
        worst_numeric: report.worst_pair.1,
        tolerance,
        pass: report.passes(tolerance),
    })
}
