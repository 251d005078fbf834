//! Gradient-matching objective: CE on clean features plus `λ` times the norm
//! of the gap between mean parameter gradients on clean and Gaussian-perturbed
//! features.

use rand_distr::{Distribution, StandardNormal};

use super::head::{ProbeBatch, ProbeHead};
use crate::error::{invalid, Result};
use crate::rng::Rng;

/// Below this gap norm the LGM term contributes a zero subgradient.
pub const ZERO_GAP: f64 = 1e-12;

/// `t + γ·δ`, `δ ~ N(0, I)`.
pub fn perturb(t: &[f64], gamma: f64, rng: &mut Rng) -> Vec<f64> {
    t.iter().map(|&v| {
        let z: f64 = StandardNormal.sample(rng);
        v + gamma * z
    }).collect()
}

/// Standard-normal draws for `m` perturbations of a whole batch, fixed once
/// per step and shared by the loss value and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbDraws {
    pub deltas: Vec<Vec<f64>>,
}

impl PerturbDraws {
    pub fn sample(rows: usize, d: usize, m_draws: usize, rng: &mut Rng) -> Self {
        let deltas = (0..m_draws).map(|_| (0..rows * d).map(|_| StandardNormal.sample(rng)).collect()).collect();
        Self { deltas }
    }

    fn check(&self, batch: &ProbeBatch) -> Result<()> {
        if self.deltas.is_empty() || self.deltas.iter().any(|d| d.len() != batch.features.len()) {
            return invalid("perturbation draws do not match the batch shape");
        }
        Ok(())
    }

    fn perturbed(&self, batch: &ProbeBatch, gamma: f64) -> Vec<ProbeBatch> {
        self.deltas
            .iter()
            .map(|delta| ProbeBatch {
                d: batch.d,
                features: batch.features.iter().zip(delta).map(|(t, z)| t + gamma * z).collect(),
                labels: batch.labels.clone(),
            })
            .collect()
    }
}

/// Mean clean gradient minus the mean perturbed gradient (averaged over draws).
fn gradient_gap(head: &ProbeHead, batch: &ProbeBatch, pert: &[ProbeBatch]) -> Result<(Vec<f64>, Vec<f64>)> {
    let clean = head.batch_param_grad(batch)?;
    let mut gap = clean.clone();
    let s = 1.0 / pert.len() as f64;
    for pb in pert {
        for (g, p) in gap.iter_mut().zip(head.batch_param_grad(pb)?) {
            *g -= s * p;
        }
    }
    Ok((clean, gap))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖mean ∇ℓ(t) − mean ∇ℓ(t + γδ)‖` with the given frozen draws.
pub fn lgm_value(head: &ProbeHead, batch: &ProbeBatch, gamma: f64, draws: &PerturbDraws) -> Result<f64> {
    draws.check(batch)?;
    if gamma == 0.0 {
        return Ok(0.0);
    }
    let (_, gap) = gradient_gap(head, batch, &draws.perturbed(batch, gamma))?;
    Ok(norm(&gap))
}

/// [`lgm_value`] with `m_draws` fresh perturbations of the whole batch.
pub fn lgm_loss(head: &ProbeHead, batch: &ProbeBatch, gamma: f64, m_draws: usize, rng: &mut Rng) -> Result<f64> {
    if gamma < 0.0 || m_draws == 0 {
        return invalid(format!("need gamma >= 0 and m_draws >= 1, got {gamma} and {m_draws}"));
    }
    let draws = PerturbDraws::sample(batch.len(), batch.d, m_draws, rng);
    lgm_value(head, batch, gamma, &draws)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    /// `ce + λ·lgm`
    pub loss: f64,
    pub ce: f64,
    pub lgm: f64,
    pub grad: Vec<f64>,
}

/// Value and exact gradient of `ce + λ·lgm` for frozen draws.
///
/// The LGM gradient is `(H_clean − mean H_pert)·u` with `u` the unit gap
/// vector, each `H` applied as a Hessian-vector product.
pub fn total_loss_and_grad(head: &ProbeHead, batch: &ProbeBatch, gamma: f64, lambda: f64, draws: &PerturbDraws) -> Result<Objective> {
    draws.check(batch)?;
    if gamma < 0.0 || lambda < 0.0 {
        return invalid(format!("need gamma, lambda >= 0, got {gamma} and {lambda}"));
    }
    let ce = head.ce_loss(batch)?;
    if gamma == 0.0 {
        return Ok(Objective { loss: ce, ce, lgm: 0.0, grad: head.batch_param_grad(batch)? });
    }
    let pert = draws.perturbed(batch, gamma);
    let (mut grad, gap) = gradient_gap(head, batch, &pert)?;
    let lgm = norm(&gap);
    if lambda > 0.0 && lgm >= ZERO_GAP {
        let u: Vec<f64> = gap.iter().map(|g| g / lgm).collect();
        let hc = head.batch_hvp(batch, &u)?;
        grad.iter_mut().zip(&hc).for_each(|(g, h)| *g += lambda * h);
        let s = lambda / pert.len() as f64;
        for pb in &pert {
            grad.iter_mut().zip(head.batch_hvp(pb, &u)?).for_each(|(g, h)| *g -= s * h);
        }
    }
    Ok(Objective { loss: ce + lambda * lgm, ce, lgm, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgm::HeadKind;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn zero_gamma_is_identity() {
        let t = [0.5, -1.0, 2.0];
        assert_eq!(perturb(&t, 0.0, &mut rng::seeded(1)), t);
    }

    #[test]
    fn perturbation_energy() {
        let mut r = rng::seeded(2);
        let t = vec![0.0; 64];
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| perturb(&t, 0.01, &mut r).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n as f64;
        let expected = 0.01f64.powi(2) * 64.0;
        assert!((mean / expected - 1.0).abs() < 0.02, "{mean} vs {expected}");
    }

    #[test]
    fn hand_computed_single_sample_gap() {
        // linear head, d = 2, C = 2, zero weights: p = (1/2, 1/2) everywhere,
        // so the gap is (p − e_y) ⊗ [t − t̂; 0] = (−1/2, 1/2) ⊗ (−γδ, 0)
        let head = ProbeHead::zeros(HeadKind::Linear, 2, 2);
        let batch = ProbeBatch::new(2, vec![1.0, -2.0], vec![0]).unwrap();
        let draws = PerturbDraws { deltas: vec![vec![0.3, -0.4]] };
        let gamma = 0.1;
        let expected = (2.0 * 0.25 * (gamma * 0.5f64).powi(2)).sqrt();
        assert!((lgm_value(&head, &batch, gamma, &draws).unwrap() - expected).abs() < 1e-15);
        assert_eq!(lgm_value(&head, &batch, 0.0, &draws).unwrap(), 0.0);
    }

    #[test]
    fn lambda_zero_is_plain_ce() {
        let mut r = rng::seeded(3);
        let head = ProbeHead::init(HeadKind::Mlp, 4, 3, &mut r);
        let batch = ProbeBatch::new(4, (0..8).map(|i| i as f64 * 0.1).collect(), vec![1, 2]).unwrap();
        let draws = PerturbDraws::sample(2, 4, 2, &mut r);
        let obj = total_loss_and_grad(&head, &batch, 0.01, 0.0, &draws).unwrap();
        assert_eq!(obj.loss, head.ce_loss(&batch).unwrap());
        assert_eq!(obj.grad, head.batch_param_grad(&batch).unwrap());
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for kind in [HeadKind::Linear, HeadKind::Mlp] {
            let mut r = rng::seeded(4);
            let head = ProbeHead::init(kind, 8, 3, &mut r);
            let head = ProbeHead { theta: head.theta.iter().map(|v| v + r.random_range(-0.5..0.5)).collect(), ..head };
            let batch = ProbeBatch::new(8, (0..32).map(|_| r.random_range(-1.0..1.0)).collect(), vec![0, 1, 2, 1]).unwrap();
            let draws = PerturbDraws::sample(4, 8, 2, &mut r);
            let (gamma, lambda) = (0.3, 0.7);
            let obj = total_loss_and_grad(&head, &batch, gamma, lambda, &draws).unwrap();
            let h = 1e-6;
            let mut worst = 0.0f64;
            let scale = obj.grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
            for i in 0..head.num_params() {
                let eval = |s: f64| {
                    let mut th = head.clone();
                    th.theta[i] += s;
                    total_loss_and_grad(&th, &batch, gamma, lambda, &draws).unwrap().loss
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max((fd - obj.grad[i]).abs() / scale);
            }
            assert!(worst < 1e-6, "{kind:?}: {worst}");
        }
    }
}
