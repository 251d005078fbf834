//! Mini-batch training of a probe head on `ce + λ·lgm`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::FeatureSplits;
use super::head::{HeadKind, ProbeHead};
use super::objective::{lgm_value, total_loss_and_grad, PerturbDraws};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LgmConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Flatness radius; `None` means `γ·(√d + 3)`.
    pub rho: Option<f64>,
    pub m_draws: usize,
    /// `None` picks 6e-4 for linear heads and 1e-4 for mlp heads.
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for LgmConfig {
    fn default() -> Self {
        Self { gamma: 0.01, lambda: 0.15, rho: None, m_draws: 1, lr: None, batch_size: 32, epochs: 10, weight_decay: 0.0, beta1: 0.9, beta2: 0.95, seed: 0 }
    }
}

impl LgmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.lambda >= 0.0) {
            return invalid(format!("gamma and lambda must be non-negative, got {} and {}", self.gamma, self.lambda));
        }
        if self.rho.is_some_and(|r| !(r > 0.0)) {
            return invalid("rho must be positive");
        }
        if self.m_draws == 0 || self.batch_size == 0 || self.epochs == 0 {
            return invalid("m_draws, batch_size and epochs must be positive");
        }
        if self.lr.is_some_and(|lr| !(lr > 0.0)) || self.weight_decay < 0.0 {
            return invalid("lr must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn lr_for(&self, kind: HeadKind) -> f64 {
        self.lr.unwrap_or(match kind {
            HeadKind::Linear => 6e-4,
            HeadKind::Mlp => 1e-4,
        })
    }

    pub fn rho_for(&self, d: usize) -> f64 {
        self.rho.unwrap_or(self.gamma * ((d as f64).sqrt() + 3.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// CE on the whole training split after the last epoch.
    pub final_ce: f64,
    /// LGM value on the whole training split after the last epoch.
    pub final_lgm: f64,
    pub steps: usize,
}

/// Trains a fresh head for `cfg.epochs` epochs.
///
/// Initialization, batch order and perturbations use separate streams of
/// `cfg.seed`, so runs differing only in `λ` see the same batches.
pub fn train_probe(splits: &FeatureSplits, kind: HeadKind, cfg: &LgmConfig) -> Result<(ProbeHead, ProbeMetrics)> {
    cfg.validate()?;
    let train = &splits.train;
    if train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return invalid("every split must be non-empty");
    }
    if splits.val.d != train.d || splits.test.d != train.d || splits.val.classes != train.classes || splits.test.classes != train.classes {
        return invalid("splits disagree on feature dimension or class count");
    }
    let (d, c) = (train.d, train.classes);
    let mut head = ProbeHead::init(kind, d, c, &mut rng::stream(cfg.seed, streams::PROBE_INIT));
    let mut shuffle_rng = rng::stream(cfg.seed, streams::SHUFFLE);
    let mut perturb_rng = rng::stream(cfg.seed, streams::PERTURB);

    let n = head.num_params();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let decay: Vec<bool> = match kind {
        HeadKind::Linear => (0..n).map(|i| i < c * d).collect(),
        HeadKind::Mlp => (0..n).map(|i| i < d * d || (d * d + d..d * d + d + c * d).contains(&i)).collect(),
    };
    let lr = cfg.lr_for(kind);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.gather(chunk)?;
            let draws = PerturbDraws::sample(batch.len(), d, cfg.m_draws, &mut perturb_rng);
            let obj = total_loss_and_grad(&head, &batch, cfg.gamma, cfg.lambda, &draws)?;
            if !obj.loss.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { iter: step, detail: format!("epoch {epoch}: loss {} (ce {}, lgm {})", obj.loss, obj.ce, obj.lgm) });
            }
            step += 1;
            let c1 = 1.0 - cfg.beta1.powi(step as i32);
            let c2 = 1.0 - cfg.beta2.powi(step as i32);
            for i in 0..n {
                let g = obj.grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let wd = if decay[i] { cfg.weight_decay * head.theta[i] } else { 0.0 };
                head.theta[i] -= lr * ((m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8) + wd);
            }
        }
    }

    let full = train.as_batch()?;
    let draws = PerturbDraws::sample(full.len(), d, cfg.m_draws, &mut rng::stream(cfg.seed, streams::EVAL));
    let metrics = ProbeMetrics {
        train_accuracy: head.accuracy(&full)?,
        val_accuracy: head.accuracy(&splits.val.as_batch()?)?,
        test_accuracy: head.accuracy(&splits.test.as_batch()?)?,
        final_ce: head.ce_loss(&full)?,
        final_lgm: lgm_value(&head, &full, cfg.gamma, &draws)?,
        steps: step,
    };
    Ok((head, metrics))
}
