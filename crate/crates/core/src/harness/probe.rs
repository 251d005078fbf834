//! Probe-head experiments: penalty comparison, the flatness bound on random
//! configurations, and sensitivity maps.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::output::{Check, OutputDir};
use super::ExperimentSpec;
use crate::error::Result;
use crate::lgm::{
    flatness_report, gaussian_blobs, mean_correct_fraction, random_plane, read_feature_file, sensitivity_map, train_probe, BlobSpec, FeatureSplits, HeadKind,
    LgmConfig, ProbeHead,
};
use crate::rng::{self, streams};

fn splits(spec: &ExperimentSpec, seed: u64) -> Result<FeatureSplits> {
    let p = &spec.config.probe;
    match &p.features {
        Some(path) => read_feature_file(path)?.split_three(p.val_fraction, p.test_fraction, seed),
        None => gaussian_blobs(&p.blobs, seed),
    }
}

#[derive(Debug, Clone, Serialize)]
struct ProbeRow {
    seed: u64,
    lambda: f64,
    train_accuracy: f64,
    val_accuracy: f64,
    test_accuracy: f64,
    final_ce: f64,
    final_lgm: f64,
    r_rho_hat: f64,
    beta_hat: f64,
    bound_rhs: f64,
    correct_fraction: f64,
}

#[derive(Serialize)]
struct LambdaSummary {
    lambda: f64,
    mean_test_accuracy: f64,
    mean_r_rho_hat: f64,
    mean_correct_fraction: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub(crate) fn run_probe(spec: &ExperimentSpec, out: &mut OutputDir, checks: &mut Vec<Check>) -> Result<()> {
    let p = &spec.config.probe;
    let mut rows = Vec::new();
    for s in 0..p.n_seeds as u64 {
        let seed = spec.seed + s;
        let data = splits(spec, seed)?;
        for &lambda in &p.lambdas {
            let cfg = LgmConfig { lambda, seed, ..p.lgm.clone() };
            let (head, m) = train_probe(&data, p.head, &cfg)?;
            let flat = flatness_report(&head, &data.test, &cfg, p.n_pairs, p.n_dirs)?;
            let cf = mean_correct_fraction(&head, &data.test, p.planes, p.half_width, p.grid_n, seed)?;
            rows.push(ProbeRow {
                seed,
                lambda,
                train_accuracy: m.train_accuracy,
                val_accuracy: m.val_accuracy,
                test_accuracy: m.test_accuracy,
                final_ce: m.final_ce,
                final_lgm: m.final_lgm,
                r_rho_hat: flat.r_rho_hat,
                beta_hat: flat.beta_hat,
                bound_rhs: flat.bound_rhs,
                correct_fraction: cf,
            });
        }
    }
    out.write_with("probe.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in &rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })?;

    let summary: Vec<LambdaSummary> = p
        .lambdas
        .iter()
        .map(|&lambda| {
            let of = |f: fn(&ProbeRow) -> f64| mean(rows.iter().filter(|r| r.lambda == lambda).map(f));
            LambdaSummary {
                lambda,
                mean_test_accuracy: of(|r| r.test_accuracy),
                mean_r_rho_hat: of(|r| r.r_rho_hat),
                mean_correct_fraction: of(|r| r.correct_fraction),
            }
        })
        .collect();
    out.write_json("summary.json", &summary)?;

    let base = &summary[0];
    let others = &summary[1..];
    if !others.is_empty() {
        let r_ok = others.iter().all(|s| s.mean_r_rho_hat <= base.mean_r_rho_hat);
        let cf_ok = others.iter().all(|s| s.mean_correct_fraction >= base.mean_correct_fraction);
        let drop = p.max_accuracy_drop / 100.0;
        let acc_ok = others.iter().all(|s| s.mean_test_accuracy >= base.mean_test_accuracy - drop);
        let list = |f: fn(&LambdaSummary) -> f64, prec: usize| -> String {
            summary.iter().map(|s| format!("lambda {}: {:.*}", s.lambda, prec, f(s))).collect::<Vec<_>>().join(", ")
        };
        checks.push(Check::new("r_rho_not_larger", r_ok, format!("mean R_rho {}", list(|s| s.mean_r_rho_hat, 6))));
        checks.push(Check::new("correct_fraction_not_smaller", cf_ok, format!("mean correct fraction {}", list(|s| s.mean_correct_fraction, 4))));
        checks.push(Check::new(
            "accuracy_kept",
            acc_ok,
            format!("mean test accuracy {} (allowed drop {} points)", list(|s| s.mean_test_accuracy, 4), p.max_accuracy_drop),
        ));
    }
    if summary.len() >= 3 {
        let mut sorted: Vec<&LambdaSummary> = summary.iter().collect();
        sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        let cliff = sorted.windows(2).map(|w| (w[1].mean_test_accuracy - w[0].mean_test_accuracy).abs() * 100.0).fold(0.0, f64::max);
        checks.push(Check::new("lambda_continuity", cliff <= 5.0, format!("largest accuracy step between neighbouring lambdas {cliff:.3} points")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct BoundRow {
    config: usize,
    d: usize,
    classes: usize,
    n: usize,
    gamma: f64,
    theta_scale: f64,
    lgm_value: f64,
    ce_value: f64,
    beta_hat: f64,
    r_rho_hat: f64,
    bound_rhs: f64,
    bound_holds: bool,
}

/// The bound with analytic `β̂` on random linear heads over random blob data.
pub(crate) fn run_flatness(spec: &ExperimentSpec, out: &mut OutputDir, checks: &mut Vec<Check>) -> Result<()> {
    let p = &spec.config.probe;
    let mut rng = rng::seeded(spec.seed);
    let mut rows = Vec::with_capacity(p.bound_configs);
    for config in 0..p.bound_configs {
        let d = rng.random_range(2..=24);
        let classes = rng.random_range(2..=6);
        let n = rng.random_range(16..=128);
        let blobs = BlobSpec {
            d,
            classes,
            n_train: n,
            n_val: 1,
            n_test: 1,
            separation: rng.random_range(0.5..4.0),
            spread: rng.random_range(0.3..2.0),
            corruption: rng.random_range(0.0..1.0),
        };
        let data = gaussian_blobs(&blobs, rng.random())?.train;
        let theta_scale = 10f64.powf(rng.random_range(-1.0..1.0));
        let theta: Vec<f64> = (0..HeadKind::Linear.param_count(d, classes))
            .map(|_| theta_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let head = ProbeHead::from_theta(HeadKind::Linear, d, classes, theta)?;
        let gamma = 10f64.powf(rng.random_range(-3.0..-0.5));
        let cfg = LgmConfig { gamma, m_draws: rng.random_range(1..=4), seed: rng.random(), ..p.lgm.clone() };
        let r = flatness_report(&head, &data, &cfg, p.n_pairs, p.n_dirs)?;
        rows.push(BoundRow {
            config,
            d,
            classes,
            n,
            gamma,
            theta_scale,
            lgm_value: r.lgm_value,
            ce_value: r.ce_value,
            beta_hat: r.beta_hat,
            r_rho_hat: r.r_rho_hat,
            bound_rhs: r.bound_rhs,
            bound_holds: r.bound_holds,
        });
    }
    out.write_with("flatness.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in &rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let violations = rows.iter().filter(|r| !r.bound_holds).count();
    let tightest = rows.iter().map(|r| r.lgm_value / r.bound_rhs).fold(0.0, f64::max);
    checks.push(Check::new(
        "flatness_bound",
        violations == 0,
        format!("{violations} violations in {} configurations; largest lgm / bound ratio {tightest:.4}", rows.len()),
    ));
    Ok(())
}

#[derive(Serialize)]
struct MapRow {
    lambda: f64,
    sample: usize,
    label: usize,
    correct_fraction: f64,
    file: String,
}

/// Maps around the first `sensmap_samples` test rows, one random plane per
/// row shared by every `λ`.
pub(crate) fn run_sensmap(spec: &ExperimentSpec, out: &mut OutputDir) -> Result<()> {
    let p = &spec.config.probe;
    let data = splits(spec, spec.seed)?;
    let count = p.sensmap_samples.min(data.test.len());
    let mut rng = rng::stream(spec.seed, streams::EVAL);
    let planes: Vec<(Vec<f64>, Vec<f64>)> = (0..count).map(|_| random_plane(data.test.d, &mut rng)).collect();
    let mut rows = Vec::new();
    for &lambda in &p.lambdas {
        let cfg = LgmConfig { lambda, seed: spec.seed, ..p.lgm.clone() };
        let (head, _) = train_probe(&data, p.head, &cfg)?;
        for (i, (u, v)) in planes.iter().enumerate() {
            let map = sensitivity_map(&head, data.test.row(i), data.test.labels[i], u, v, p.half_width, p.grid_n)?;
            let file = format!("sensmap/lambda{lambda}_sample{i}.csv");
            out.write_with(&file, |w| map.write_csv(w))?;
            rows.push(MapRow { lambda, sample: i, label: data.test.labels[i], correct_fraction: map.correct_fraction, file });
        }
    }
    out.write_with("sensmap.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in &rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })
}
