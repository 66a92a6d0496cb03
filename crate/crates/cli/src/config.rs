//! Run configuration: model hyperparameters plus training-loop settings.

use serde::{Deserialize, Serialize};
use vcmr_model::ModelConfig;

use crate::{CliError, Result};

/// Which training objectives participate in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Gates {
    pub vr: bool,
    pub ml: bool,
    pub video_cl: bool,
    pub frame_cl: bool,
}

impl Default for Gates {
    fn default() -> Self {
        Gates { vr: true, ml: true, video_cl: true, frame_cl: true }
    }
}

impl Gates {
    /// Retrieval + localization only — the base configuration the
    /// contrastive objectives are ablated against.
    pub fn base() -> Self {
        Gates { vr: true, ml: true, video_cl: false, frame_cl: false }
    }

    pub fn any(&self) -> bool {
        self.vr || self.ml || self.video_cl || self.frame_cl
    }
}

/// Everything a training run needs, serializable as the run's config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub gates: Gates,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total optimizer steps spent warming the learning rate up.
    pub warmup_proportion: f64,
    /// Stop after this many evaluations without validation improvement.
    pub early_stop_patience: usize,
    /// Evaluate the validation split every this many epochs.
    pub eval_every: usize,
    /// Spans kept per video during localization.
    pub top_n: usize,
    /// Maximum span length in clip units.
    pub l_max: usize,
    /// Seed for shuffling, negative sampling, and dropout. Distinct from
    /// `model.seed`, which controls parameter initialization.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            gates: Gates::default(),
            epochs: 200,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_proportion: 0.01,
            early_stop_patience: 10,
            eval_every: 1,
            top_n: 10,
            l_max: 16,
            seed: 2024,
        }
    }
}

impl RunConfig {
    /// Full-scale profile: the big architecture plus its batch and epoch
    /// budget. Feature dimensions stay whatever the data provides.
    pub fn paper() -> Self {
        RunConfig {
            model: ModelConfig::paper(),
            epochs: 100,
            batch_size: 128,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(CliError::Config { detail });
        self.model.validate().map_err(|e| CliError::Config { detail: e.to_string() })?;
        if !self.gates.vr && !self.gates.ml {
            return bad("at least one of the retrieval/localization objectives must be enabled".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch size must be ≥ 2 for in-batch negatives".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive and finite", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_proportion) {
            return bad(format!("warmup proportion {} must be in [0,1)", self.warmup_proportion));
        }
        if self.early_stop_patience == 0 || self.eval_every == 0 {
            return bad("early-stop patience and eval cadence must be ≥ 1".into());
        }
        if self.top_n == 0 || self.l_max == 0 {
            return bad("top_n and l_max must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
