use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of the decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LmConfig {
    /// Byte-level desk configuration: 4 layers, 4 heads, d=128, L=128, V=256.
    pub fn desk() -> Self {
        Self { n_layers: 4, n_heads: 4, d_model: 128, context_len: 128, vocab_size: 256, dropout: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return invalid("n_layers, n_heads, d_model and vocab_size must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return invalid(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.context_len < 2 {
            return invalid("context_len must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Optimizer and schedule settings for a pre-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRecipe {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub eval_interval: usize,
    /// Windows per evaluation segment.
    pub eval_windows: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainRecipe {
    /// AdamW at 6e-4 with weight decay 0.1, betas (0.9, 0.95), cosine floor 6e-5.
    fn default() -> Self {
        let total_iters = 5000;
        Self {
            lr_max: 6e-4,
            lr_min: 6e-5,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 16,
            grad_accum_steps: 1,
            warmup_iters: total_iters / 50,
            total_iters,
            eval_interval: 250,
            eval_windows: 64,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return invalid(format!("need 0 < lr_min <= lr_max, got {} / {}", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return invalid("weight_decay and grad_clip must be non-negative");
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.eval_interval == 0 || self.eval_windows == 0 {
            return invalid("batch_size, grad_accum_steps, eval_interval and eval_windows must be positive");
        }
        if self.total_iters == 0 || self.warmup_iters > self.total_iters {
            return invalid("need total_iters > 0 and warmup_iters <= total_iters");
        }
        Ok(())
    }

    /// Linear warmup to `lr_max`, then cosine decay to `lr_min` at `total_iters`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter < self.warmup_iters {
            return self.lr_max * (iter + 1) as f64 / self.warmup_iters as f64;
        }
        let span = (self.total_iters - self.warmup_iters).max(1) as f64;
        let progress = ((iter - self.warmup_iters) as f64 / span).min(1.0);
        let coeff = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr_min + coeff * (self.lr_max - self.lr_min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        LmConfig::desk().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = LmConfig { n_heads: 3, ..LmConfig::desk() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let r = TrainRecipe { warmup_iters: 10, total_iters: 110, ..TrainRecipe::default() };
        assert!((r.lr_at(9) - 6e-4).abs() < 1e-15);
        assert!((r.lr_at(10) - 6e-4).abs() < 1e-15);
        assert!((r.lr_at(60) - 3.3e-4).abs() < 1e-12);
        assert!((r.lr_at(110) - 6e-5).abs() < 1e-15);
        assert!(r.lr_at(0) < r.lr_at(5));
    }

    #[test]
    fn default_recipe_matches_reference_optimizer() {
        let r = TrainRecipe::default();
        assert_eq!((r.lr_max, r.lr_min, r.weight_decay, r.beta1, r.beta2), (6e-4, 6e-5, 0.1, 0.9, 0.95));
        r.validate().unwrap();
    }
}
