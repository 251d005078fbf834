//! Pre-training loop: AdamW with decoupled weight decay, warmup plus cosine
//! schedule, and periodic evaluation on fixed clean, noise and mixed windows.

use std::io;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{LmConfig, TrainRecipe};
use super::model::{row_losses, LmParams};
use crate::corpus::{sample_batch, Batch, TokenCorpus};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, streams};

/// Losses at one checkpoint, in nats per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iter: usize,
    pub tokens_seen: u64,
    pub loss_clean_val: f64,
    /// Absent when the training corpus has no noise region long enough for a window.
    pub loss_noise_train: Option<f64>,
    pub loss_mixed_train: f64,
}

pub const EVAL_CSV_HEADER: [&str; 5] = ["iter", "tokens_seen", "loss_clean_val", "loss_noise_train", "loss_mixed_train"];

pub fn write_eval_csv<W: io::Write>(out: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVAL_CSV_HEADER)?;
    for r in reports {
        w.write_record([
            r.iter.to_string(),
            r.tokens_seen.to_string(),
            r.loss_clean_val.to_string(),
            r.loss_noise_train.map(|v| v.to_string()).unwrap_or_default(),
            r.loss_mixed_train.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalReport>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != EVAL_CSV_HEADER {
        return Err(Error::CorruptFile(format!("{}: unexpected header {header:?}", path.display())));
    }
    let bad = |what: &str, v: &str| Error::CorruptFile(format!("{}: bad {what} {v:?}", path.display()));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(EVAL_CSV_HEADER[i], &rec[i]));
        out.push(EvalReport {
            iter: rec[0].parse().map_err(|_| bad("iter", &rec[0]))?,
            tokens_seen: rec[1].parse().map_err(|_| bad("tokens_seen", &rec[1]))?,
            loss_clean_val: f(2)?,
            loss_noise_train: if rec[3].is_empty() { None } else { Some(f(3)?) },
            loss_mixed_train: f(4)?,
        });
    }
    Ok(out)
}

/// Corpora for one run. `noise_region` indexes into `mixed`.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub mixed: &'a TokenCorpus,
    pub clean_val: &'a TokenCorpus,
    pub noise_region: Range<usize>,
}

impl<'a> TrainData<'a> {
    pub fn new(mixed: &'a TokenCorpus, clean_val: &'a TokenCorpus) -> Self {
        Self { mixed, clean_val, noise_region: mixed.noise_region() }
    }
}

/// Window offsets held fixed across all checkpoints of a run.
///
/// Drawn from the eval stream of the recipe seed in the order clean, noise,
/// mixed, so runs sharing a seed and a validation corpus score the same clean
/// windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalWindows {
    pub clean: Vec<usize>,
    pub noise: Option<Vec<usize>>,
    pub mixed: Vec<usize>,
}

impl EvalWindows {
    pub fn draw(data: &TrainData, context_len: usize, count: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, streams::EVAL);
        let mut draw = |region: Range<usize>| -> Option<Vec<usize>> {
            let last = region.end.checked_sub(context_len + 1)?;
            if last < region.start {
                return None;
            }
            Some((0..count).map(|_| rng.random_range(region.start..=last)).collect())
        };
        let clean = draw(0..data.clean_val.len())
            .ok_or_else(|| Error::InvalidArgument(format!("validation corpus of {} tokens is shorter than a window", data.clean_val.len())))?;
        let noise = draw(data.noise_region.clone());
        let mixed = draw(0..data.mixed.len())
            .ok_or_else(|| Error::InvalidArgument(format!("training corpus of {} tokens is shorter than a window", data.mixed.len())))?;
        Ok(Self { clean, noise, mixed })
    }
}

/// Mean loss of each window starting at `offsets`, evaluated in chunks of `chunk` rows.
pub fn window_losses(params: &LmParams, corpus: &TokenCorpus, offsets: &[usize], context_len: usize, chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(offsets.len());
    for part in offsets.chunks(chunk.max(1)) {
        let batch = Batch::from_offsets(corpus, context_len, part.to_vec())?;
        let logits = params.forward_logits(&batch.inputs, batch.batch_size)?;
        out.extend(row_losses(&logits, &batch.targets)?);
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn evaluate(params: &LmParams, data: &TrainData, windows: &EvalWindows, chunk: usize, iter: usize, tokens_seen: u64) -> Result<EvalReport> {
    let l = params.config.context_len;
    let clean = window_losses(params, data.clean_val, &windows.clean, l, chunk)?;
    let noise = match &windows.noise {
        Some(w) => Some(mean(&window_losses(params, data.mixed, w, l, chunk)?)),
        None => None,
    };
    let mixed = window_losses(params, data.mixed, &windows.mixed, l, chunk)?;
    Ok(EvalReport { iter, tokens_seen, loss_clean_val: mean(&clean), loss_noise_train: noise, loss_mixed_train: mean(&mixed) })
}

struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    fn new(params: &LmParams) -> Self {
        let mut decay = vec![false; params.num_params()];
        for span in params.layout.decayed() {
            decay[span.offset..span.offset + span.len].fill(true);
        }
        Self { m: vec![0.0; decay.len()], v: vec![0.0; decay.len()], decay, t: 0 }
    }

    fn step(&mut self, data: &mut [f32], grads: &[f32], lr: f64, r: &TrainRecipe) {
        self.t += 1;
        let (b1, b2) = (r.beta1 as f32, r.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let wd = r.weight_decay as f32;
        for i in 0..data.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            let decay = if self.decay[i] { wd * data[i] } else { 0.0 };
            data[i] -= lr * (mhat / (vhat.sqrt() + 1e-8) + decay);
        }
    }
}

/// Result of [`train`]: final parameters and every evaluation in order.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: LmParams,
    pub reports: Vec<EvalReport>,
}

/// Trains from a fresh initialization. See [`train_observed`].
pub fn train(config: LmConfig, recipe: &TrainRecipe, data: &TrainData) -> Result<TrainOutcome> {
    train_observed(config, recipe, data, |_, _| Ok(()))
}

/// Trains for `recipe.total_iters` steps, evaluating at iteration 0, every
/// `eval_interval` steps, and at the end. `observe` sees the parameters at
/// each evaluation; an error from it stops the run.
///
/// Identical inputs give bit-identical reports: batches, initialization,
/// evaluation windows and dropout each use their own stream of the recipe seed.
pub fn train_observed(
    config: LmConfig,
    recipe: &TrainRecipe,
    data: &TrainData,
    mut observe: impl FnMut(&LmParams, &EvalReport) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    recipe.validate()?;
    if data.mixed.vocab_size() != config.vocab_size || data.clean_val.vocab_size() != config.vocab_size {
        return invalid(format!("corpus vocabulary does not match model vocabulary {}", config.vocab_size));
    }
    if data.noise_region.end > data.mixed.len() {
        return invalid(format!("noise region {:?} outside corpus of {}", data.noise_region, data.mixed.len()));
    }
    let l = config.context_len;
    let windows = EvalWindows::draw(data, l, recipe.eval_windows, recipe.seed)?;
    let mut params = LmParams::<f32>::init(config, recipe.seed)?;
    let mut opt = AdamW::new(&params);
    let mut batch_rng = rng::stream(recipe.seed, streams::BATCH);
    let mut dropout_rng = rng::stream(recipe.seed, streams::DROPOUT);
    let mut grads = vec![0.0f32; params.num_params()];
    let tokens_per_step = (recipe.batch_size * recipe.grad_accum_steps * l) as u64;
    let chunk = recipe.batch_size;

    let mut reports = Vec::new();
    let first = evaluate(&params, data, &windows, chunk, 0, 0)?;
    observe(&params, &first)?;
    reports.push(first);

    for iter in 0..recipe.total_iters {
        grads.fill(0.0);
        let scale = 1.0 / recipe.grad_accum_steps as f64;
        let mut loss = 0.0;
        for _ in 0..recipe.grad_accum_steps {
            let batch = sample_batch(data.mixed, l, recipe.batch_size, &mut batch_rng)?;
            let cache = params.forward(&batch.inputs, batch.batch_size, Some(&mut dropout_rng))?;
            loss += scale * params.backward(&cache, &batch.targets, scale, &mut grads)?;
        }
        let norm = grads.iter().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt();
        let lr = recipe.lr_at(iter);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Divergence { iter, detail: format!("loss {loss}, grad norm {norm}, lr {lr:e}") });
        }
        if recipe.grad_clip > 0.0 && norm > recipe.grad_clip {
            let s = (recipe.grad_clip / norm) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        opt.step(&mut params.data, &grads, lr, recipe);
        if !params.is_finite() {
            return Err(Error::Divergence { iter, detail: format!("non-finite parameters after update; loss {loss}, grad norm {norm}, lr {lr:e}") });
        }

        let done = iter + 1;
        if done % recipe.eval_interval == 0 || done == recipe.total_iters {
            let report = evaluate(&params, data, &windows, chunk, done, done as u64 * tokens_per_step)?;
            observe(&params, &report)?;
            reports.push(report);
        }
    }
    Ok(TrainOutcome { params, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic_text, NoiseSpec, TextStyle};

    fn tiny() -> LmConfig {
        LmConfig { n_layers: 1, n_heads: 2, d_model: 16, context_len: 16, vocab_size: 256, dropout: 0.0 }
    }

    fn recipe() -> TrainRecipe {
        TrainRecipe { batch_size: 4, total_iters: 30, warmup_iters: 3, eval_interval: 10, eval_windows: 8, lr_max: 3e-3, lr_min: 3e-4, ..TrainRecipe::default() }
    }

    #[test]
    fn reports_are_reproducible_and_loss_falls() {
        let (train_c, val) = synthetic_text(20_000, 1, TextStyle::default()).split_tail(4_000).unwrap();
        let mixed = NoiseSpec::uniform(0.05, 2).contaminate(&train_c).unwrap();
        let data = TrainData::new(&mixed, &val);
        let a = train(tiny(), &recipe(), &data).unwrap();
        let b = train(tiny(), &recipe(), &data).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.params, b.params);
        let iters: Vec<_> = a.reports.iter().map(|r| r.iter).collect();
        assert_eq!(iters, [0, 10, 20, 30]);
        assert!(a.reports[3].loss_clean_val < a.reports[0].loss_clean_val - 0.5);
        assert!(a.reports.iter().all(|r| r.loss_noise_train.is_some()));
    }

    #[test]
    fn clean_run_has_no_noise_loss() {
        let (train_c, val) = synthetic_text(10_000, 1, TextStyle::default()).split_tail(2_000).unwrap();
        let mixed = NoiseSpec::uniform(0.0, 2).contaminate(&train_c).unwrap();
        let r = TrainRecipe { total_iters: 2, warmup_iters: 1, eval_interval: 1, ..recipe() };
        let out = train(tiny(), &r, &TrainData::new(&mixed, &val)).unwrap();
        assert!(out.reports.iter().all(|r| r.loss_noise_train.is_none()));
    }

    #[test]
    fn divergence_is_reported() {
        let (train_c, val) = synthetic_text(10_000, 1, TextStyle::default()).split_tail(2_000).unwrap();
        let r = TrainRecipe { lr_max: 1e30, lr_min: 1e29, grad_clip: 0.0, total_iters: 50, ..recipe() };
        let err = train(tiny(), &r, &TrainData::new(&train_c, &val)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn csv_round_trip() {
        let reports = vec![
            EvalReport { iter: 0, tokens_seen: 0, loss_clean_val: 5.5, loss_noise_train: None, loss_mixed_train: 5.25 },
            EvalReport { iter: 10, tokens_seen: 640, loss_clean_val: 0.1 + 0.2, loss_noise_train: Some(5.6), loss_mixed_train: 1e-3 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        write_eval_csv(std::fs::File::create(&path).unwrap(), &reports).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iter,tokens_seen,loss_clean_val,loss_noise_train,loss_mixed_train\n"));
        assert_eq!(read_eval_csv(&path).unwrap(), reports);
    }
}
