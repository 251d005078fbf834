//! Named experiments over the other modules, each writing CSV and JSON
//! outputs plus a manifest into its own directory.
//!
//! ```no_run
//! use noisetrap::harness::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentSpec};
//!
//! let spec = ExperimentSpec::new(ExperimentKind::TheoryVerify, ExperimentConfig::default(), 0, "runs/theory".into());
//! let manifest = run_experiment(&spec)?;
//! assert!(manifest.passed());
//! # Ok::<(), noisetrap::Error>(())
//! ```

mod compare;
mod config;
mod output;
mod probe;
mod sweep;
mod theory_run;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use compare::{compare_runs, DeltaReport, DeltaRow, MetricRef};
pub use config::{CorpusConfig, ExperimentConfig, ProbeConfig, SweepConfig, TheoryConfig};
pub use output::{output_root, Check, FileEntry, OutputDir, RunManifest, RunStatus, HASH_ALGORITHM, MANIFEST_FILE, OUTPUT_ROOT_VAR};
pub use sweep::{curve_file_name, DELTAS_HEADER, K_HEADER};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    NoiseSweep,
    GaussianVsUniform,
    TheoryVerify,
    LgmProbe,
    Flatness,
    Sensmap,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::NoiseSweep,
        ExperimentKind::GaussianVsUniform,
        ExperimentKind::TheoryVerify,
        ExperimentKind::LgmProbe,
        ExperimentKind::Flatness,
        ExperimentKind::Sensmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::NoiseSweep => "noise-sweep",
            ExperimentKind::GaussianVsUniform => "gaussian-vs-uniform",
            ExperimentKind::TheoryVerify => "theory-verify",
            ExperimentKind::LgmProbe => "lgm-probe",
            ExperimentKind::Flatness => "flatness",
            ExperimentKind::Sensmap => "sensmap",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment {s:?}; expected one of {}", Self::ALL.map(|k| k.name()).join(", "))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentKind,
    /// File the config was read from, kept for the record.
    pub config_path: Option<PathBuf>,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn new(name: ExperimentKind, config: ExperimentConfig, seed: u64, output_dir: PathBuf) -> Self {
        Self { name, config_path: None, config, seed, output_dir }
    }

    /// Config validity and presence of every input file the experiment reads.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let inputs: Vec<&PathBuf> = match self.name {
            ExperimentKind::NoiseSweep | ExperimentKind::GaussianVsUniform => c.corpus.clean_path.iter().collect(),
            ExperimentKind::LgmProbe | ExperimentKind::Sensmap => c.probe.features.iter().collect(),
            ExperimentKind::TheoryVerify | ExperimentKind::Flatness => Vec::new(),
        };
        if let Some(missing) = inputs.into_iter().find(|p| !p.is_file()) {
            return Err(Error::Config(format!("input file {} does not exist", missing.display())));
        }
        if self.name == ExperimentKind::NoiseSweep && c.sweep.alphas.is_empty() && c.sweep.gaussian_alphas.is_empty() {
            return Err(Error::Config("noise-sweep needs at least one noise proportion".into()));
        }
        Ok(())
    }
}

/// Runs the named pipeline and writes `manifest.json`.
///
/// An invalid spec is rejected before anything is written. If the pipeline
/// fails part way, the outputs written so far stay in place, the manifest is
/// written with status `failed`, and the error is returned.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunManifest> {
    spec.validate()?;
    let mut out = OutputDir::create(&spec.output_dir)?;
    let started = output::unix_now();
    let mut checks = Vec::new();
    let result = out
        .write_with("config.toml", |w| Ok(w.write_all(spec.config.to_toml()?.as_bytes())?))
        .and_then(|()| match spec.name {
            ExperimentKind::NoiseSweep => {
                let s = &spec.config.sweep;
                sweep::run(spec, &mut out, &mut checks, &s.alphas, &s.gaussian_alphas)
            }
            ExperimentKind::GaussianVsUniform => {
                let a = [spec.config.sweep.check_alpha];
                sweep::run(spec, &mut out, &mut checks, &a, &a)
            }
            ExperimentKind::TheoryVerify => theory_run::run(spec, &mut out, &mut checks),
            ExperimentKind::LgmProbe => probe::run_probe(spec, &mut out, &mut checks),
            ExperimentKind::Flatness => probe::run_flatness(spec, &mut out, &mut checks),
            ExperimentKind::Sensmap => probe::run_sensmap(spec, &mut out),
        });
    match result {
        Ok(()) => output::finish(&out, spec, started, checks, None),
        Err(e) => {
            output::finish(&out, spec, started, checks, Some(e.to_string()))?;
            Err(e)
        }
    }
}
