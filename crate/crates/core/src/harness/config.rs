//! Experiment configuration: one TOML file with a section per module.
//!
//! Every field has a default, so a file only needs the values it changes.
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lgm::{BlobSpec, HeadKind, LgmConfig};
use crate::lm::{LmConfig, TrainRecipe};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Clean token file (`u16` little-endian). When absent a synthetic text corpus is generated.
    pub clean_path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    /// Tokens cut from the end of the clean corpus for validation.
    pub val_tokens: usize,
    /// Seed of the synthetic corpus; `None` uses the experiment seed.
    pub seed: Option<u64>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { clean_path: None, synthetic_bytes: 10_000_000, val_tokens: 500_000, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Noise proportions for uniform noise. Include 0 for the clean reference.
    pub alphas: Vec<f64>,
    /// Noise proportions for clipped discrete-Gaussian noise.
    pub gaussian_alphas: Vec<f64>,
    /// `None` means `(V − 1) / 2`.
    pub mu: Option<f64>,
    /// `None` means `V / 100`.
    pub sigma: Option<f64>,
    /// Seeds `seed, seed + 1, …` are run for every proportion.
    pub n_seeds: usize,
    pub save_checkpoints: bool,
    /// Proportion the checks look at.
    pub check_alpha: f64,
    /// Largest accepted relative clean-loss increase at `check_alpha`.
    pub max_relative_increase: f64,
    /// Clean-loss drop that defines the checkpoint for the noise-loss check.
    pub min_clean_drop: f64,
    /// Allowed distance of the noise loss from `ln V` at that checkpoint.
    pub noise_band: f64,
    pub k_min: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 0.01, 0.05, 0.2],
            gaussian_alphas: Vec::new(),
            mu: None,
            sigma: None,
            n_seeds: 1,
            save_checkpoints: false,
            check_alpha: 0.05,
            max_relative_increase: 0.05,
            min_clean_drop: 2.0,
            noise_band: 0.5,
            k_min: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Subset of `{1, 2, 3}`.
    pub cases: Vec<u8>,
    pub draws: usize,
    pub grid: usize,
    pub lemma1_instances: usize,
    pub lemma1_tolerance: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self { cases: vec![1, 2, 3], draws: 1000, grid: 10_000, lemma1_instances: 100, lemma1_tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub head: HeadKind,
    /// Feature file; when absent the Gaussian-blob task is used.
    pub features: Option<PathBuf>,
    /// Validation and test shares when splitting a feature file.
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub blobs: BlobSpec,
    /// Training settings; `lgm.lambda` is ignored in favour of `lambdas`.
    pub lgm: LgmConfig,
    /// Penalty weights to compare. The first is the baseline.
    pub lambdas: Vec<f64>,
    pub n_seeds: usize,
    pub planes: usize,
    pub half_width: f64,
    pub grid_n: usize,
    pub n_pairs: usize,
    pub n_dirs: usize,
    /// Random head/data configurations for the flatness bound.
    pub bound_configs: usize,
    /// Largest accepted drop of mean test accuracy, in percentage points.
    pub max_accuracy_drop: f64,
    /// Test samples that get a sensitivity map.
    pub sensmap_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Linear,
            features: None,
            val_fraction: 0.2,
            test_fraction: 0.2,
            blobs: BlobSpec { corruption: 1.0, ..BlobSpec::default() },
            lgm: LgmConfig::default(),
            lambdas: vec![0.0, 0.15],
            n_seeds: 5,
            planes: 20,
            half_width: 3.0,
            grid_n: 21,
            n_pairs: 8,
            n_dirs: 16,
            bound_configs: 100,
            max_accuracy_drop: 0.2,
            sensmap_samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: LmConfig,
    pub train: TrainRecipe,
    pub sweep: SweepConfig,
    pub theory: TheoryConfig,
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses `text`, then applies `key.path=value` overrides, where `value`
    /// is a TOML value (`3`, `0.05`, `[0, 0.2]`, `"mlp"`, `true`).
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Checks every section the experiments read.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.probe.lgm.validate()?;
        let s = &self.sweep;
        if s.n_seeds == 0 {
            return invalid("sweep.n_seeds must be positive");
        }
        for &a in s.alphas.iter().chain(&s.gaussian_alphas) {
            if !(0.0..1.0).contains(&a) {
                return invalid(format!("noise proportion {a} outside [0, 1)"));
            }
        }
        if s.sigma.is_some_and(|v| !(v > 0.0)) || s.mu.is_some_and(|v| !v.is_finite()) {
            return invalid("sweep.sigma must be positive and sweep.mu finite");
        }
        if self.corpus.clean_path.is_none() && self.corpus.synthetic_bytes <= self.corpus.val_tokens {
            return invalid("corpus.synthetic_bytes must exceed corpus.val_tokens");
        }
        let t = &self.theory;
        if t.cases.iter().any(|c| !(1..=3).contains(c)) {
            return invalid(format!("theory.cases {:?} must be drawn from 1, 2, 3", t.cases));
        }
        if t.grid < 2 {
            return invalid("theory.grid must be at least 2");
        }
        let p = &self.probe;
        if p.lambdas.is_empty() || p.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return invalid("probe.lambdas must be non-empty and non-negative");
        }
        if p.n_seeds == 0 || p.planes == 0 || p.grid_n == 0 || p.n_pairs == 0 || p.n_dirs == 0 {
            return invalid("probe.n_seeds, planes, grid_n, n_pairs and n_dirs must be positive");
        }
        if !(p.half_width >= 0.0) {
            return invalid("probe.half_width must be non-negative");
        }
        if !(p.val_fraction > 0.0 && p.test_fraction > 0.0 && p.val_fraction + p.test_fraction < 1.0) {
            return invalid("probe.val_fraction and probe.test_fraction must be positive with sum below 1");
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value: toml::Value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .map(|mut t| t.remove("v").expect("parsed key"))
        .or_else(|_| Ok::<_, Error>(toml::Value::String(raw.trim().to_string())))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields one item");
    let mut cur = table;
    for part in parents {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override {key}: {part} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
