//! Model hyperparameters shared by the encoders, objectives, and retrieval.

use serde::{Deserialize, Serialize};

use crate::{ModelError, Result};

/// Hyperparameters of the retrieval model.
///
/// The default profile is sized for a single desktop CPU; [`ModelConfig::paper`]
/// switches the architecture to the full-scale configuration (hidden size 384,
/// 128 clip units). Feature dimensions `d_v`/`d_w` describe the input data and
/// are shared by both profiles since the synthetic corpus generator emits them
/// directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden (model) dimension d.
    pub d: usize,
    /// Visual input feature dimension per clip unit.
    pub d_v: usize,
    /// Word / subtitle input feature dimension.
    pub d_w: usize,
    /// Attention heads per block; must divide `d`.
    pub heads: usize,
    /// Feed-forward inner dimension.
    pub d_ff: usize,
    /// Maximum clip units per video (positional table size).
    pub n_v_max: usize,
    /// Maximum words per query (positional table size).
    pub n_q_max: usize,
    /// Width of the start/end boundary convolution kernels (odd).
    pub conv_width: usize,
    /// Dropout rate applied in training mode.
    pub dropout: f64,
    /// Whether the subtitle stream exists alongside the visual stream.
    pub subtitles: bool,
    /// Margin of the video-retrieval hinge loss.
    pub margin: f64,
    /// Loss weights [retrieval hinge, localization, video NCE, frame MI].
    pub lambda: [f64; 4],
    /// Exponent weight fusing video score into the final moment score.
    pub gamma: f64,
    /// Videos kept by first-stage retrieval.
    pub top_k: usize,
    /// Negatives sampled per anchor for the retrieval hinge.
    pub n_neg: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_v: 96,
            d_w: 48,
            heads: 4,
            d_ff: 256,
            n_v_max: 48,
            n_q_max: 24,
            conv_width: 5,
            dropout: 0.1,
            subtitles: true,
            margin: 0.1,
            lambda: [1.0, 0.01, 0.01, 0.01],
            gamma: 30.0,
            top_k: 100,
            n_neg: 10,
            seed: 13,
        }
    }
}

impl ModelConfig {
    /// Full-scale architecture (hidden 384, 128 clip units, 30-word queries).
    pub fn paper() -> Self {
        ModelConfig {
            d: 384,
            d_ff: 1536,
            n_v_max: 128,
            n_q_max: 30,
            ..ModelConfig::default()
        }
    }

    /// Dimension of each attention head.
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(ModelError::config(format!("{name} must be positive")));
            }
            Ok(())
        }
        positive("d", self.d)?;
        positive("d_v", self.d_v)?;
        positive("d_w", self.d_w)?;
        positive("heads", self.heads)?;
        positive("d_ff", self.d_ff)?;
        positive("n_v_max", self.n_v_max)?;
        positive("n_q_max", self.n_q_max)?;
        positive("top_k", self.top_k)?;
        positive("n_neg", self.n_neg)?;
        if self.d % self.heads != 0 {
            return Err(ModelError::config(format!(
                "d = {} not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.conv_width == 0 || self.conv_width % 2 == 0 {
            return Err(ModelError::config(format!(
                "conv_width must be odd and positive, got {}",
                self.conv_width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(ModelError::config(format!(
                "margin must be finite and non-negative, got {}",
                self.margin
            )));
        }
        if !self.gamma.is_finite() {
            return Err(ModelError::config("gamma must be finite"));
        }
        for (i, l) in self.lambda.iter().enumerate() {
            if !(l.is_finite() && *l >= 0.0) {
                return Err(ModelError::config(format!(
                    "lambda[{i}] must be finite and non-negative, got {l}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
    }

    #[test]
    fn default_loss_weights_and_margin() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.lambda, [1.0, 0.01, 0.01, 0.01]);
        assert_eq!(cfg.margin, 0.1);
        assert_eq!(cfg.d_ff, 4 * cfg.d);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_even_conv_width_and_bad_dropout() {
        let cfg = ModelConfig { conv_width: 4, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn serde_round_trip() {
        let cfg = ModelConfig { d: 32, heads: 2, subtitles: false, ..ModelConfig::default() };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
