//! Pre-training runs over noise proportions and noise kinds.
//!
//! For each seed the clean reference (uniform, α = 0) runs first and its
//! parameters are kept at every evaluation, so that every later run can score
//! the reference on its own noise windows and estimate `k` at matched
//! iterations.

use std::collections::BTreeMap;

use serde::Serialize;

use super::output::{Check, OutputDir};
use super::ExperimentSpec;
use crate::corpus::{read_token_file, synthetic_text, NoiseKind, NoiseSpec, TextStyle, TokenCorpus};
use crate::error::{invalid, Result};
use crate::lm::{save_checkpoint, train_observed, window_losses, write_eval_csv, EvalReport, EvalWindows, LmParams, TrainData};
use crate::theory::k_from_losses;

pub const DELTAS_HEADER: [&str; 12] = [
    "noise",
    "alpha",
    "seed",
    "iter",
    "tokens_seen",
    "loss_clean_val",
    "ref_loss_iter",
    "delta_iter",
    "rel_delta_iter",
    "clean_tokens",
    "ref_loss_clean_tokens",
    "delta_clean_tokens",
];

pub const K_HEADER: [&str; 13] =
    ["noise", "alpha", "seed", "iter", "lc_ref", "lc", "ln_ref", "ln", "epsilon", "eps_over_k", "k", "exp_lower_bound", "status"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
enum Noise {
    Uniform,
    Gaussian,
}

impl Noise {
    fn name(self) -> &'static str {
        match self {
            Noise::Uniform => "uniform",
            Noise::Gaussian => "gaussian",
        }
    }
}

/// `curves/<noise>_a<alpha>_s<seed>.csv`
pub fn curve_file_name(noise: &str, alpha: f64, seed: u64) -> String {
    format!("curves/{noise}_a{alpha}_s{seed}.csv")
}

struct Run {
    noise: Noise,
    alpha: f64,
    seed: u64,
    reports: Vec<EvalReport>,
}

struct KRow {
    noise: Noise,
    alpha: f64,
    seed: u64,
    iter: usize,
    lc_ref: f64,
    lc: f64,
    ln_ref: f64,
    ln: f64,
    estimate: std::result::Result<crate::theory::KEstimate, String>,
}

/// Parameters and clean loss of the reference run at each evaluated iteration.
type Snapshots = BTreeMap<usize, (LmParams, f64)>;

fn clean_corpus(spec: &ExperimentSpec) -> Result<(TokenCorpus, TokenCorpus)> {
    let c = &spec.config;
    let full = match &c.corpus.clean_path {
        Some(path) => read_token_file(path, c.model.vocab_size)?,
        None => {
            if c.model.vocab_size != 256 {
                return invalid(format!("the synthetic corpus is byte-level; model.vocab_size is {}", c.model.vocab_size));
            }
            synthetic_text(c.corpus.synthetic_bytes, c.corpus.seed.unwrap_or(spec.seed), TextStyle::default())
        }
    };
    if full.len() <= c.corpus.val_tokens {
        return invalid(format!("clean corpus of {} tokens cannot spare {} for validation", full.len(), c.corpus.val_tokens));
    }
    full.split_tail(c.corpus.val_tokens)
}

fn noise_spec(spec: &ExperimentSpec, noise: Noise, alpha: f64, seed: u64) -> NoiseSpec {
    let v = spec.config.model.vocab_size;
    match noise {
        Noise::Uniform => NoiseSpec::uniform(alpha, seed),
        Noise::Gaussian => {
            let default = NoiseSpec::gaussian_default(v, alpha, seed);
            let NoiseKind::Gaussian { mu, sigma } = default.kind else { unreachable!() };
            let s = &spec.config.sweep;
            NoiseSpec { kind: NoiseKind::Gaussian { mu: s.mu.unwrap_or(mu), sigma: s.sigma.unwrap_or(sigma) }, ..default }
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    spec: &ExperimentSpec,
    out: &mut OutputDir,
    train_clean: &TokenCorpus,
    val: &TokenCorpus,
    noise: Noise,
    alpha: f64,
    seed: u64,
    reference: Option<&Snapshots>,
    keep: Option<&mut Snapshots>,
    k_rows: &mut Vec<KRow>,
) -> Result<Run> {
    let c = &spec.config;
    let mixed = noise_spec(spec, noise, alpha, seed).contaminate(train_clean)?;
    let data = TrainData::new(&mixed, val);
    let recipe = crate::lm::TrainRecipe { seed, ..c.train.clone() };
    let l = c.model.context_len;
    let windows = EvalWindows::draw(&data, l, recipe.eval_windows, seed)?;
    let tag = format!("{}_a{alpha}_s{seed}", noise.name());
    let mut keep = keep;
    let outcome = train_observed(c.model, &recipe, &data, |params, report| {
        if let Some(store) = keep.as_deref_mut() {
            store.insert(report.iter, (params.clone(), report.loss_clean_val));
        }
        if let (Some(refs), Some(noise_windows), Some(ln)) = (reference, &windows.noise, report.loss_noise_train) {
            if let Some((ref_params, lc_ref)) = refs.get(&report.iter) {
                let ln_ref = mean(&window_losses(ref_params, &mixed, noise_windows, l, recipe.batch_size)?);
                let estimate = k_from_losses(*lc_ref, report.loss_clean_val, ln_ref, ln).map_err(|e| e.to_string());
                k_rows.push(KRow { noise, alpha, seed, iter: report.iter, lc_ref: *lc_ref, lc: report.loss_clean_val, ln_ref, ln, estimate });
            }
        }
        if c.sweep.save_checkpoints {
            let name = format!("checkpoints/{tag}_i{}.ckpt", report.iter);
            let path = out.path(&name)?;
            std::fs::create_dir_all(path.parent().expect("inside the output directory"))?;
            save_checkpoint(&path, params, &recipe, report.iter)?;
            out.register(&name)?;
        }
        Ok(())
    })?;
    out.write_with(&curve_file_name(noise.name(), alpha, seed), |w| write_eval_csv(w, &outcome.reports))?;
    Ok(Run { noise, alpha, seed, reports: outcome.reports })
}

/// Reference loss at `tokens` clean tokens, linear between evaluations.
fn interpolate(reference: &[EvalReport], tokens: f64) -> Option<f64> {
    let pos = reference.iter().position(|r| r.tokens_seen as f64 >= tokens)?;
    let hi = &reference[pos];
    if pos == 0 || hi.tokens_seen as f64 == tokens {
        return Some(hi.loss_clean_val);
    }
    let lo = &reference[pos - 1];
    let t = (tokens - lo.tokens_seen as f64) / (hi.tokens_seen - lo.tokens_seen) as f64;
    Some(lo.loss_clean_val + t * (hi.loss_clean_val - lo.loss_clean_val))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn write_deltas(out: &mut OutputDir, runs: &[Run]) -> Result<()> {
    out.write_with("deltas.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(DELTAS_HEADER)?;
        for run in runs.iter().filter(|r| !(r.noise == Noise::Uniform && r.alpha == 0.0)) {
            let Some(reference) = runs.iter().find(|r| r.noise == Noise::Uniform && r.alpha == 0.0 && r.seed == run.seed) else { continue };
            for rep in &run.reports {
                let by_iter = reference.reports.iter().find(|r| r.iter == rep.iter).map(|r| r.loss_clean_val);
                let clean_tokens = (1.0 - run.alpha) * rep.tokens_seen as f64;
                let by_tokens = interpolate(&reference.reports, clean_tokens);
                csv.write_record([
                    run.noise.name().to_string(),
                    run.alpha.to_string(),
                    run.seed.to_string(),
                    rep.iter.to_string(),
                    rep.tokens_seen.to_string(),
                    rep.loss_clean_val.to_string(),
                    opt(by_iter),
                    opt(by_iter.map(|r| rep.loss_clean_val - r)),
                    opt(by_iter.map(|r| (rep.loss_clean_val - r) / r)),
                    clean_tokens.to_string(),
                    opt(by_tokens),
                    opt(by_tokens.map(|r| rep.loss_clean_val - r)),
                ])?;
            }
        }
        csv.flush()?;
        Ok(())
    })
}

fn write_k(out: &mut OutputDir, rows: &[KRow]) -> Result<()> {
    out.write_with("k.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(K_HEADER)?;
        for r in rows {
            let (est, status) = match &r.estimate {
                Ok(e) => ([e.epsilon, e.eps_over_k, e.k, e.exp_lower_bound].map(|v| v.to_string()), "ok".to_string()),
                Err(msg) => (Default::default(), msg.clone()),
            };
            let mut rec = vec![r.noise.name().to_string(), r.alpha.to_string(), r.seed.to_string(), r.iter.to_string()];
            rec.extend([r.lc_ref, r.lc, r.ln_ref, r.ln].map(|v| v.to_string()));
            rec.extend(est);
            rec.push(status);
            csv.write_record(rec)?;
        }
        csv.flush()?;
        Ok(())
    })
}

#[derive(Serialize)]
struct RunSummary {
    noise: Noise,
    alpha: f64,
    seed: u64,
    final_iter: usize,
    final_clean: f64,
    final_noise: Option<f64>,
    final_mixed: f64,
}

#[derive(Serialize)]
struct GroupSummary {
    noise: Noise,
    alpha: f64,
    seeds: usize,
    mean_final_clean: f64,
    mean_final_noise: Option<f64>,
    /// Relative to the uniform α = 0 mean, when present.
    rel_increase: Option<f64>,
}

#[derive(Serialize)]
struct KSummary {
    estimates: usize,
    ill_posed: usize,
    min_k: Option<f64>,
    median_k: Option<f64>,
    max_k: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    runs: Vec<RunSummary>,
    groups: Vec<GroupSummary>,
    k: KSummary,
}

fn final_of(run: &Run) -> &EvalReport {
    run.reports.last().expect("training always evaluates")
}

fn group_mean(runs: &[Run], noise: Noise, alpha: f64, f: impl Fn(&EvalReport) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = runs.iter().filter(|r| r.noise == noise && r.alpha == alpha).map(|r| f(final_of(r))).collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

pub(crate) fn run(spec: &ExperimentSpec, out: &mut OutputDir, checks: &mut Vec<Check>, uniform: &[f64], gaussian: &[f64]) -> Result<()> {
    let (train_clean, val) = clean_corpus(spec)?;
    let mut uniform = uniform.to_vec();
    uniform.sort_by(f64::total_cmp);
    uniform.dedup();
    let mut gaussian = gaussian.to_vec();
    gaussian.sort_by(f64::total_cmp);
    gaussian.dedup();
    let plan: Vec<(Noise, f64)> = uniform.iter().map(|&a| (Noise::Uniform, a)).chain(gaussian.iter().map(|&a| (Noise::Gaussian, a))).collect();
    let has_reference = uniform.first() == Some(&0.0);

    let mut runs = Vec::new();
    let mut k_rows = Vec::new();
    for s in 0..spec.config.sweep.n_seeds as u64 {
        let seed = spec.seed + s;
        let mut snapshots = Snapshots::new();
        for (i, &(noise, alpha)) in plan.iter().enumerate() {
            let is_reference = has_reference && i == 0;
            let (reference, keep) = if is_reference { (None, Some(&mut snapshots)) } else { (has_reference.then_some(&snapshots), None) };
            let run = train_one(spec, out, &train_clean, &val, noise, alpha, seed, reference, keep, &mut k_rows)?;
            runs.push(run);
        }
    }
    if has_reference {
        write_deltas(out, &runs)?;
        write_k(out, &k_rows)?;
    }

    let base = group_mean(&runs, Noise::Uniform, 0.0, |r| Some(r.loss_clean_val));
    let groups: Vec<GroupSummary> = plan
        .iter()
        .map(|&(noise, alpha)| {
            let mean_final_clean = group_mean(&runs, noise, alpha, |r| Some(r.loss_clean_val)).expect("every planned run exists");
            GroupSummary {
                noise,
                alpha,
                seeds: spec.config.sweep.n_seeds,
                mean_final_clean,
                mean_final_noise: group_mean(&runs, noise, alpha, |r| r.loss_noise_train),
                rel_increase: base.map(|b| (mean_final_clean - b) / b),
            }
        })
        .collect();
    let ks = k_estimates(&k_rows, spec.config.sweep.check_alpha);
    let mut sorted: Vec<f64> = ks.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    sorted.sort_by(f64::total_cmp);
    let k = KSummary {
        estimates: ks.len(),
        ill_posed: ks.iter().filter(|r| r.is_err()).count(),
        min_k: sorted.first().copied(),
        median_k: sorted.get(sorted.len() / 2).copied(),
        max_k: sorted.last().copied(),
    };
    let summary = Summary {
        runs: runs
            .iter()
            .map(|r| {
                let f = final_of(r);
                RunSummary {
                    noise: r.noise,
                    alpha: r.alpha,
                    seed: r.seed,
                    final_iter: f.iter,
                    final_clean: f.loss_clean_val,
                    final_noise: f.loss_noise_train,
                    final_mixed: f.loss_mixed_train,
                }
            })
            .collect(),
        groups,
        k,
    };
    out.write_json("summary.json", &summary)?;
    checks.extend(sweep_checks(spec, &runs, &k_rows));
    Ok(())
}

/// `k` at every checkpoint after the first of uniform runs at `alpha`; `Err` for ill-posed ones.
fn k_estimates(rows: &[KRow], alpha: f64) -> Vec<std::result::Result<f64, String>> {
    rows.iter()
        .filter(|r| r.noise == Noise::Uniform && r.alpha == alpha && r.iter > 0)
        .map(|r| r.estimate.as_ref().map(|e| e.k).map_err(Clone::clone))
        .collect()
}

fn sweep_checks(spec: &ExperimentSpec, runs: &[Run], k_rows: &[KRow]) -> Vec<Check> {
    let s = &spec.config.sweep;
    let a = s.check_alpha;
    let ln_v = (spec.config.model.vocab_size as f64).ln();
    let finals = |noise: Noise, alpha: f64| -> Vec<&EvalReport> { runs.iter().filter(|r| r.noise == noise && r.alpha == alpha).map(final_of).collect() };
    let mut checks = Vec::new();

    let base = group_mean(runs, Noise::Uniform, 0.0, |r| Some(r.loss_clean_val));
    let at_a = group_mean(runs, Noise::Uniform, a, |r| Some(r.loss_clean_val));
    if let (Some(b), Some(x), true) = (base, at_a, a > 0.0) {
        let rel = (x - b) / b;
        checks.push(Check::new(
            "disproportionality",
            rel < s.max_relative_increase,
            format!("final clean loss {x:.5} at alpha {a} vs {b:.5} at 0: relative increase {rel:.5} (limit {})", s.max_relative_increase),
        ));
    }

    let mut alphas: Vec<f64> = runs.iter().filter(|r| r.noise == Noise::Uniform).map(|r| r.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    if alphas.len() >= 2 {
        let means: Vec<f64> = alphas.iter().map(|&al| group_mean(runs, Noise::Uniform, al, |r| Some(r.loss_clean_val)).unwrap()).collect();
        let ok = means.windows(2).all(|w| w[1] >= w[0]);
        let pairs: Vec<String> = alphas.iter().zip(&means).map(|(al, m)| format!("{al}: {m:.5}")).collect();
        checks.push(Check::new("monotone", ok, format!("mean final clean loss by alpha {}", pairs.join(", "))));
    }

    let slow: Vec<&Run> = runs.iter().filter(|r| r.noise == Noise::Uniform && r.alpha == a && a > 0.0).collect();
    if !slow.is_empty() {
        let mut ok = true;
        let mut notes = Vec::new();
        for run in slow {
            let start = run.reports[0].loss_clean_val;
            match run.reports.iter().find(|r| r.loss_clean_val <= start - s.min_clean_drop) {
                Some(r) => {
                    let noise = r.loss_noise_train.unwrap_or(f64::NAN);
                    let gap = (noise - ln_v).abs();
                    ok &= gap <= s.noise_band;
                    notes.push(format!("seed {}: iter {} clean {:.4} noise {noise:.4} (|noise - ln V| = {gap:.4})", run.seed, r.iter, r.loss_clean_val));
                }
                None => {
                    ok = false;
                    notes.push(format!("seed {}: clean loss never fell by {}", run.seed, s.min_clean_drop));
                }
            }
        }
        checks.push(Check::new("noise_slow", ok, notes.join("; ")));
    }

    let (u, g) = (finals(Noise::Uniform, a), finals(Noise::Gaussian, a));
    if !u.is_empty() && u.len() == g.len() {
        let pairs: Vec<(f64, f64)> = g.iter().zip(&u).map(|(g, u)| (g.loss_noise_train.unwrap_or(f64::NAN), u.loss_noise_train.unwrap_or(f64::NAN))).collect();
        let ok = pairs.iter().all(|(g, u)| g < u);
        let notes: Vec<String> = pairs.iter().map(|(g, u)| format!("{g:.4} < {u:.4}")).collect();
        checks.push(Check::new("gaussian_lower", ok, format!("final noise loss gaussian vs uniform per seed: {}", notes.join(", "))));
    }

    let ks = k_estimates(k_rows, a);
    if !ks.is_empty() {
        let well: Vec<f64> = ks.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let ill = ks.len() - well.len();
        let min = well.iter().copied().fold(f64::INFINITY, f64::min);
        let ok = !well.is_empty() && min > s.k_min;
        let detail = if well.is_empty() {
            format!("all {ill} estimates ill-posed")
        } else {
            format!("{} well-posed estimates, min k {min:.4} (need > {}), {ill} ill-posed", well.len(), s.k_min)
        };
        checks.push(Check::new("k_large", ok, detail));
    }
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(iter: usize, tokens: u64, loss: f64) -> EvalReport {
        EvalReport { iter, tokens_seen: tokens, loss_clean_val: loss, loss_noise_train: None, loss_mixed_train: loss }
    }

    #[test]
    fn interpolation_is_linear_between_evaluations() {
        let r = [rep(0, 0, 5.0), rep(10, 100, 3.0), rep(20, 200, 2.0)];
        assert_eq!(interpolate(&r, 0.0), Some(5.0));
        assert_eq!(interpolate(&r, 100.0), Some(3.0));
        assert!((interpolate(&r, 150.0).unwrap() - 2.5).abs() < 1e-15);
        assert!((interpolate(&r, 95.0).unwrap() - 3.1).abs() < 1e-12);
        assert_eq!(interpolate(&r, 250.0), None);
    }

    #[test]
    fn curve_names_are_stable() {
        assert_eq!(curve_file_name("uniform", 0.05, 3), "curves/uniform_a0.05_s3.csv");
        assert_eq!(curve_file_name("gaussian", 0.0, 0), "curves/gaussian_a0_s0.csv");
    }
}
