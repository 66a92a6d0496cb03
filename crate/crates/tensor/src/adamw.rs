//! AdamW with decoupled weight decay and linear learning-rate warmup.
//!
//! Per step `t` (1-based), with bias-corrected moments `m̂`, `v̂`:
//!
//! ```text
//! m ← β₁·m + (1-β₁)·g            v ← β₂·v + (1-β₂)·g²
//! θ ← θ − lr_t·wd·θ − lr_t·m̂ / (√v̂ + ε)
//! ```
//!
//! The decay term multiplies the raw parameter (decoupled from the moment
//! update). `lr_t` ramps linearly from `lr/w` to `lr` over the first
//! `w = ⌈warmup_proportion · total_steps⌉` steps and stays constant after.

use crate::tensor::{Scalar, Tensor};
use crate::{Result, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent ramping the learning rate up.
    pub warmup_proportion: f64,
    /// Planned number of optimizer steps (drives the warmup length; zero
    /// disables warmup).
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_proportion: 0.01,
            total_steps: 0,
        }
    }
}

impl AdamWConfig {
    fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(TensorError::Config { op: "adamw", detail });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {}, {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return bad(format!("warmup proportion must lie in [0, 1], got {}", self.warmup_proportion));
        }
        Ok(())
    }
}

/// Optimizer state: first/second moments per parameter plus a step counter.
pub struct AdamW<T> {
    cfg: AdamWConfig,
    warmup_steps: u64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// Fresh state (zero moments) for parameters of the given shapes.
    pub fn new(cfg: AdamWConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        cfg.validate()?;
        let warmup_steps = (cfg.warmup_proportion * cfg.total_steps as f64).ceil() as u64;
        Ok(AdamW {
            cfg,
            warmup_steps,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate in effect at 1-based step `t`.
    pub fn effective_lr(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.cfg.lr
        } else {
            self.cfg.lr * (t as f64 / self.warmup_steps as f64)
        }
    }

    /// Apply one update. `params` and `grads` must align with the shapes the
    /// optimizer was created with.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::Dimension {
                op: "adamw",
                detail: format!(
                    "expected {} parameter/gradient pairs, got {}/{}",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(TensorError::Dimension {
                    op: "adamw",
                    detail: format!(
                        "parameter/gradient shape {:?}/{:?} does not match state {:?}",
                        p.shape(),
                        g.shape(),
                        m.shape()
                    ),
                });
            }
        }

        self.step += 1;
        let t = self.step;
        let lr_t = T::from_f64(self.effective_lr(t));
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let corr1 = T::from_f64(1.0 - self.cfg.beta1.powi(t as i32));
        let corr2 = T::from_f64(1.0 - self.cfg.beta2.powi(t as i32));
        let eps = T::from_f64(self.cfg.eps);
        let wd = T::from_f64(self.cfg.weight_decay);

        for k in 0..params.len() {
            let p = params[k].data_mut();
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p[i] = p[i] - lr_t * wd * p[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
