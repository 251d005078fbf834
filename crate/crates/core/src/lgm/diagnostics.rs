//! Smoothness and input-flatness estimates, and decision maps on 2-D planes
//! of input perturbations.

use std::io;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::FeatureDataset;
use super::head::{HeadKind, ProbeBatch, ProbeHead};
use super::objective::{lgm_value, PerturbDraws};
use super::train::LgmConfig;
use crate::error::{invalid, Error, Result};
use crate::rng::{self, streams, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub lgm_value: f64,
    pub ce_value: f64,
    pub beta_hat: f64,
    pub r_rho_hat: f64,
    pub rho: f64,
    /// `2·β̂ + 2·ce + R̂_ρ`
    pub bound_rhs: f64,
    pub bound_holds: bool,
}

/// `max ‖[t; 1]‖² / 2` over the rows: a bound on the spectral norm of the
/// per-sample softmax-CE Hessian of a linear head.
pub fn beta_hat_linear(batches: &[&ProbeBatch]) -> f64 {
    let mut best = 0.0f64;
    for b in batches {
        for i in 0..b.len() {
            let sq: f64 = b.row(i).iter().map(|v| v * v).sum::<f64>() + 1.0;
            best = best.max(sq / 2.0);
        }
    }
    best
}

fn normal_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Largest `‖∇L(θ₁) − ∇L(θ₂)‖ / ‖θ₁ − θ₂‖` over `n_pairs` pairs drawn around `θ`
/// with per-coordinate scale `0.01·max(rms θ, 1e-3)`.
pub fn beta_hat_sampled(head: &ProbeHead, batch: &ProbeBatch, n_pairs: usize, rng: &mut Rng) -> Result<f64> {
    let rms = (head.theta.iter().map(|v| v * v).sum::<f64>() / head.num_params() as f64).sqrt();
    let scale = 0.01 * rms.max(1e-3);
    let mut best = 0.0f64;
    for _ in 0..n_pairs {
        let shifted = |rng: &mut Rng| {
            let z = normal_vec(head.num_params(), rng);
            ProbeHead { theta: head.theta.iter().zip(&z).map(|(t, z)| t + scale * z).collect(), ..head.clone() }
        };
        let (a, b) = (shifted(rng), shifted(rng));
        let (ga, gb) = (a.batch_param_grad(batch)?, b.batch_param_grad(batch)?);
        let num = ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = a.theta.iter().zip(&b.theta).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    Ok(best)
}

/// Mean over rows of the largest loss increase among `n_dirs` random points on
/// the sphere of radius `rho` around the row (the centre itself counts, so
/// each term is at least zero).
pub fn input_flatness(head: &ProbeHead, data: &FeatureDataset, rho: f64, n_dirs: usize, rng: &mut Rng) -> f64 {
    let mut total = 0.0;
    let mut point = vec![0.0; data.d];
    for i in 0..data.len() {
        let (t, y) = (data.row(i), data.labels[i]);
        let base = head.sample_loss(t, y);
        let mut worst = 0.0f64;
        for _ in 0..n_dirs {
            let dir = normal_vec(data.d, rng);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            for ((p, &tv), dv) in point.iter_mut().zip(t).zip(&dir) {
                *p = tv + rho * dv / norm;
            }
            worst = worst.max(head.sample_loss(&point, y) - base);
        }
        total += worst;
    }
    total / data.len() as f64
}

/// Estimates every term of the bound on the whole dataset.
///
/// For linear heads `β̂` is analytic, taken over both the clean rows and the
/// perturbed rows entering the LGM value; mlp heads use [`beta_hat_sampled`].
pub fn flatness_report(head: &ProbeHead, data: &FeatureDataset, cfg: &LgmConfig, n_pairs: usize, n_dirs: usize) -> Result<FlatnessReport> {
    cfg.validate()?;
    if n_pairs == 0 || n_dirs == 0 {
        return invalid("n_pairs and n_dirs must be positive");
    }
    let batch = data.as_batch()?;
    let draws = PerturbDraws::sample(batch.len(), batch.d, cfg.m_draws, &mut rng::stream(cfg.seed, streams::PERTURB));
    let lgm = lgm_value(head, &batch, cfg.gamma, &draws)?;
    let ce = head.ce_loss(&batch)?;
    let beta_hat = match head.kind {
        HeadKind::Linear => {
            let perturbed: Vec<ProbeBatch> = draws
                .deltas
                .iter()
                .map(|delta| ProbeBatch { d: batch.d, features: batch.features.iter().zip(delta).map(|(t, z)| t + cfg.gamma * z).collect(), labels: batch.labels.clone() })
                .collect();
            let mut all: Vec<&ProbeBatch> = vec![&batch];
            all.extend(perturbed.iter());
            beta_hat_linear(&all)
        }
        HeadKind::Mlp => beta_hat_sampled(head, &batch, n_pairs, &mut rng::stream(cfg.seed, streams::INIT))?,
    };
    let rho = cfg.rho_for(data.d);
    let r_rho_hat = input_flatness(head, data, rho, n_dirs, &mut rng::stream(cfg.seed, streams::EVAL));
    let bound_rhs = 2.0 * beta_hat + 2.0 * ce + r_rho_hat;
    Ok(FlatnessReport { lgm_value: lgm, ce_value: ce, beta_hat, r_rho_hat, rho, bound_rhs, bound_holds: lgm <= bound_rhs })
}

/// Predicted labels on a `grid_n × grid_n` grid over the plane `t + a·u + b·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub grid_n: usize,
    pub half_width: f64,
    /// Row `i` varies `a`, column `j` varies `b`; both run from `−half_width` to `half_width`.
    pub labels: Vec<usize>,
    pub correct_fraction: f64,
}

impl SensitivityMap {
    pub fn at(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.grid_n + j]
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        if self.grid_n == 1 {
            return 0.0;
        }
        -self.half_width + 2.0 * self.half_width * i as f64 / (self.grid_n - 1) as f64
    }

    /// Long-format CSV `i,j,a,b,label`.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "a", "b", "label"])?;
        for i in 0..self.grid_n {
            for j in 0..self.grid_n {
                w.write_record([i.to_string(), j.to_string(), self.coordinate(i).to_string(), self.coordinate(j).to_string(), self.at(i, j).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Orthonormalizes `(u, v)` by Gram-Schmidt.
pub fn orthonormal_plane(u: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return invalid("plane vectors differ in length");
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nu > 0.0) || !(nv > 0.0) {
        return Err(Error::DegeneratePlane("zero direction".into()));
    }
    let e1: Vec<f64> = u.iter().map(|x| x / nu).collect();
    let dot: f64 = e1.iter().zip(v).map(|(a, b)| a * b).sum();
    let r: Vec<f64> = v.iter().zip(&e1).map(|(b, a)| b - dot * a).collect();
    let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nr <= 1e-10 * nv {
        return Err(Error::DegeneratePlane("directions are parallel".into()));
    }
    Ok((e1, r.iter().map(|x| x / nr).collect()))
}

pub fn sensitivity_map(head: &ProbeHead, t: &[f64], y: usize, u: &[f64], v: &[f64], half_width: f64, grid_n: usize) -> Result<SensitivityMap> {
    if grid_n.is_multiple_of(2) {
        return invalid(format!("grid_n {grid_n} must be odd so the centre is on the grid"));
    }
    if t.len() != head.d || u.len() != head.d {
        return invalid(format!("vectors must have dimension {}", head.d));
    }
    if !(half_width >= 0.0) {
        return invalid("half_width must be non-negative");
    }
    let (e1, e2) = orthonormal_plane(u, v)?;
    let mut map = SensitivityMap { grid_n, half_width, labels: Vec::with_capacity(grid_n * grid_n), correct_fraction: 0.0 };
    let mut point = vec![0.0; t.len()];
    for i in 0..grid_n {
        let a = map.coordinate(i);
        for j in 0..grid_n {
            let b = map.coordinate(j);
            for k in 0..t.len() {
                point[k] = t[k] + a * e1[k] + b * e2[k];
            }
            map.labels.push(head.predict(&point));
        }
    }
    map.correct_fraction = map.labels.iter().filter(|&&l| l == y).count() as f64 / map.labels.len() as f64;
    Ok(map)
}

/// Two independent standard-normal directions in `ℝ^d`.
pub fn random_plane(d: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    (normal_vec(d, rng), normal_vec(d, rng))
}

/// Mean correct fraction over `planes` random planes through random rows of `data`.
pub fn mean_correct_fraction(head: &ProbeHead, data: &FeatureDataset, planes: usize, half_width: f64, grid_n: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, streams::EVAL);
    let mut total = 0.0;
    for _ in 0..planes {
        let i = rng.random_range(0..data.len());
        let (u, v) = random_plane(data.d, &mut rng);
        total += sensitivity_map(head, data.row(i), data.labels[i], &u, &v, half_width, grid_n)?.correct_fraction;
    }
    Ok(total / planes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgm::{gaussian_blobs, BlobSpec, Split};

    fn setup() -> (ProbeHead, FeatureDataset) {
        let data = gaussian_blobs(&BlobSpec { n_train: 64, ..BlobSpec::default() }, 1).unwrap().train;
        let head = ProbeHead::init(HeadKind::Linear, data.d, data.classes, &mut rng::seeded(2));
        (head, data)
    }

    #[test]
    fn vanishing_radius_vanishing_flatness() {
        let (head, data) = setup();
        let r = input_flatness(&head, &data, 1e-12, 8, &mut rng::seeded(0));
        assert!(r.abs() < 1e-9);
        assert!(input_flatness(&head, &data, 1.0, 8, &mut rng::seeded(0)) > 0.0);
    }

    #[test]
    fn zero_mlp_head_has_zero_lgm() {
        // a zero linear head still has input-dependent weight gradients; a zero
        // mlp head has dead hidden units and a constant bias gradient
        let (_, data) = setup();
        let head = ProbeHead::zeros(HeadKind::Mlp, data.d, data.classes);
        let rep = flatness_report(&head, &data, &LgmConfig::default(), 4, 4).unwrap();
        assert_eq!(rep.lgm_value, 0.0);
        assert!(rep.bound_holds);
    }

    #[test]
    fn map_centre_and_zero_width() {
        let (head, data) = setup();
        let t = data.row(0);
        let u: Vec<f64> = (0..data.d).map(|i| i as f64).collect();
        let v: Vec<f64> = (0..data.d).map(|i| (i % 3) as f64).collect();
        let map = sensitivity_map(&head, t, data.labels[0], &u, &v, 5.0, 7).unwrap();
        assert_eq!(map.at(3, 3), head.predict(t));
        let flat = sensitivity_map(&head, t, data.labels[0], &u, &v, 0.0, 5).unwrap();
        assert!(flat.labels.iter().all(|&l| l == flat.labels[0]));
    }

    #[test]
    fn degenerate_and_even_grids_rejected() {
        let (head, data) = setup();
        let u = vec![1.0; data.d];
        let v: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        assert!(matches!(sensitivity_map(&head, data.row(0), 0, &u, &v, 1.0, 5), Err(Error::DegeneratePlane(_))));
        assert!(sensitivity_map(&head, data.row(0), 0, &u, &vec![0.5; data.d], 1.0, 4).is_err());
    }

    #[test]
    fn sampled_beta_of_linear_head_respects_analytic_bound() {
        let (head, data) = setup();
        let batch = data.as_batch().unwrap();
        let sampled = beta_hat_sampled(&head, &batch, 16, &mut rng::seeded(3)).unwrap();
        assert!(sampled <= beta_hat_linear(&[&batch]));
        assert_eq!(data.split, Split::Train);
    }
}
