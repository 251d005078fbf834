use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use noisetrap::corpus::{read_token_file, synthetic_text, write_token_file, NoiseKind, NoiseSpec, TextStyle};
use noisetrap::harness::{compare_runs, output_root, run_experiment, ExperimentConfig, ExperimentKind, ExperimentSpec, MetricRef, RunManifest};
use noisetrap::lgm::{flatness_report, gaussian_blobs, random_plane, read_feature_file, sensitivity_map, train_probe, FeatureSplits, HeadKind, LgmConfig};
use noisetrap::rng;
use noisetrap::theory::{verify_prop1, Prop1Case};

/// Desk-scale experiments on random-noise pre-training and probe heads.
#[derive(Parser)]
#[command(name = "noisetrap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, mix and inspect token files.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Pre-train one model on a clean corpus contaminated with noise.
    Train(TrainArgs),
    /// Exact checks of the mixture-loss theory.
    #[command(subcommand)]
    Theory(TheoryCommand),
    /// Train a probe head and print its metrics.
    Probe(ProbeArgs),
    /// Train a probe head and print its flatness report.
    Flatness(FlatnessArgs),
    /// Train a probe head and write one sensitivity-map grid as CSV.
    Sensmap(SensmapArgs),
    /// Run a named experiment and write its manifest.
    Run(RunArgs),
    /// Difference one metric between two runs.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Uniform,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Uniform,
    Gaussian,
    /// Synthetic English-like bytes (V = 256).
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Linear,
    Mlp,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Linear => HeadKind::Linear,
            HeadArg::Mlp => HeadKind::Mlp,
        }
    }
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Write a fresh corpus.
    Gen {
        #[arg(long, value_enum)]
        source: SourceArg,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        vocab: usize,
        /// Gaussian mean; defaults to (V - 1) / 2.
        #[arg(long)]
        mu: Option<f64>,
        /// Gaussian standard deviation; defaults to V / 100.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append noise to a clean corpus so it makes up `alpha` of the result.
    Mix {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long, value_enum, default_value = "uniform")]
        noise: NoiseArg,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 256)]
        vocab: usize,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print length, provenance and unigram entropy as JSON.
    Inspect {
        path: PathBuf,
        #[arg(long, default_value_t = 256)]
        vocab: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.total_iters=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to a name under $NOISETRAP_OUT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let all: Vec<String> = extra.iter().chain(&self.sets).cloned().collect();
        Ok(ExperimentConfig::from_toml_with(&text, &all)?)
    }

    fn out_or(&self, default: String) -> PathBuf {
        self.out.clone().unwrap_or_else(|| output_root().join(default))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "uniform")]
    noise: NoiseArg,
    /// Keep a checkpoint at every evaluation.
    #[arg(long)]
    checkpoints: bool,
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Check the sign of the loss gap on random parameter draws.
    Verify {
        /// 1, 2, 3 or all.
        #[arg(long, default_value = "all")]
        case: String,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 10_000)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct HeadArgs {
    /// Feature file; the Gaussian-blob task is used when absent.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "linear")]
    head: HeadArg,
    #[arg(long, default_value_t = 0.01)]
    gamma: f64,
    #[arg(long, default_value_t = 0.15)]
    lambda: f64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl HeadArgs {
    fn lgm(&self) -> LgmConfig {
        LgmConfig { gamma: self.gamma, lambda: self.lambda, lr: self.lr, epochs: self.epochs, seed: self.seed, ..LgmConfig::default() }
    }

    fn splits(&self) -> Result<FeatureSplits> {
        let defaults = noisetrap::harness::ProbeConfig::default();
        Ok(match &self.features {
            Some(path) => read_feature_file(path)?.split_three(defaults.val_fraction, defaults.test_fraction, self.seed)?,
            None => gaussian_blobs(&defaults.blobs, self.seed)?,
        })
    }
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    head: HeadArgs,
}

#[derive(Args)]
struct FlatnessArgs {
    #[command(flatten)]
    head: HeadArgs,
    #[arg(long, default_value_t = 8)]
    n_pairs: usize,
    #[arg(long, default_value_t = 16)]
    n_dirs: usize,
}

#[derive(Args)]
struct SensmapArgs {
    #[command(flatten)]
    head: HeadArgs,
    /// Index of the test sample at the centre.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 3.0)]
    half_width: f64,
    #[arg(long, default_value_t = 21)]
    grid_n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// One of noise-sweep, gaussian-vs-uniform, theory-verify, lgm-probe, flatness, sensmap.
    name: String,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Manifest file or run directory.
    a: PathBuf,
    b: PathBuf,
    /// CSV column to compare.
    #[arg(long, default_value = "loss_clean_val")]
    metric: String,
    /// File within run A; found automatically when the column is unique.
    #[arg(long)]
    file_a: Option<String>,
    #[arg(long)]
    file_b: Option<String>,
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn noise_spec(noise: NoiseArg, vocab: usize, alpha: f64, mu: Option<f64>, sigma: Option<f64>, seed: u64) -> NoiseSpec {
    match noise {
        NoiseArg::Uniform => NoiseSpec::uniform(alpha, seed),
        NoiseArg::Gaussian => {
            let d = NoiseSpec::gaussian_default(vocab, alpha, seed);
            let NoiseKind::Gaussian { mu: m, sigma: s } = d.kind else { unreachable!() };
            NoiseSpec { kind: NoiseKind::Gaussian { mu: mu.unwrap_or(m), sigma: sigma.unwrap_or(s) }, ..d }
        }
    }
}

fn corpus(cmd: CorpusCommand) -> Result<ExitCode> {
    match cmd {
        CorpusCommand::Gen { source, count, vocab, mu, sigma, seed, out } => {
            let c = match source {
                SourceArg::Text => {
                    if vocab != 256 {
                        bail!("text corpora are byte-level; use --vocab 256");
                    }
                    synthetic_text(count, seed, TextStyle::default())
                }
                SourceArg::Uniform => noise_spec(NoiseArg::Uniform, vocab, 0.0, mu, sigma, seed).generate(vocab, count)?,
                SourceArg::Gaussian => noise_spec(NoiseArg::Gaussian, vocab, 0.0, mu, sigma, seed).generate(vocab, count)?,
            };
            write_token_file(&c, &out)?;
        }
        CorpusCommand::Mix { clean, noise, alpha, vocab, mu, sigma, seed, out } => {
            let clean = read_token_file(&clean, vocab)?;
            let mixed = noise_spec(noise, vocab, alpha, mu, sigma, seed).contaminate(&clean)?;
            write_token_file(&mixed, &out)?;
        }
        CorpusCommand::Inspect { path, vocab } => {
            let c = read_token_file(&path, vocab)?;
            let region = c.noise_region();
            print_json(&serde_json::json!({
                "path": path,
                "tokens": c.len(),
                "vocab_size": c.vocab_size(),
                "origin": c.origin().to_string(),
                "provenance": c.provenance(),
                "noise_region": [region.start, region.end],
                "unigram_entropy": c.unigram_entropy(),
            }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn finish_run(manifest: &RunManifest, dir: &Path) -> ExitCode {
    for c in &manifest.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("manifest: {}", dir.join(noisetrap::harness::MANIFEST_FILE).display());
    if manifest.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Corpus(cmd) => corpus(cmd),
        Command::Train(a) => {
            let key = match a.noise {
                NoiseArg::Uniform => "sweep.alphas",
                NoiseArg::Gaussian => "sweep.gaussian_alphas",
            };
            let other = match a.noise {
                NoiseArg::Uniform => "sweep.gaussian_alphas=[]",
                NoiseArg::Gaussian => "sweep.alphas=[]",
            };
            let mut extra = vec![format!("{key}=[{}]", a.alpha), other.to_string(), "sweep.n_seeds=1".to_string()];
            if a.checkpoints {
                extra.push("sweep.save_checkpoints=true".to_string());
            }
            let config = a.cfg.load(&extra)?;
            let noise = if matches!(a.noise, NoiseArg::Uniform) { "uniform" } else { "gaussian" };
            let out = a.cfg.out_or(format!("train-{noise}-a{}-s{}", a.alpha, a.cfg.seed));
            let mut spec = ExperimentSpec::new(ExperimentKind::NoiseSweep, config, a.cfg.seed, out.clone());
            spec.config_path = a.cfg.config.clone();
            let manifest = run_experiment(&spec)?;
            println!("curve: {}", out.join(noisetrap::harness::curve_file_name(noise, a.alpha, a.cfg.seed)).display());
            Ok(finish_run(&manifest, &out))
        }
        Command::Theory(TheoryCommand::Verify { case, draws, grid, seed }) => {
            let cases: Vec<Prop1Case> = if case == "all" {
                vec![Prop1Case::One, Prop1Case::Two, Prop1Case::Three]
            } else {
                vec![Prop1Case::from_number(case.parse().with_context(|| format!("--case {case:?}"))?)?]
            };
            let reports: Vec<_> = cases.into_iter().map(|c| verify_prop1(c, draws, grid, seed)).collect();
            let ok = reports.iter().all(|r| r.passed());
            if reports.len() == 1 {
                print_json(&reports[0])?;
            } else {
                print_json(&reports)?;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Probe(a) => {
            let (_, metrics) = train_probe(&a.head.splits()?, a.head.head.into(), &a.head.lgm())?;
            print_json(&metrics)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Flatness(a) => {
            let splits = a.head.splits()?;
            let cfg = a.head.lgm();
            let (head, _) = train_probe(&splits, a.head.head.into(), &cfg)?;
            print_json(&flatness_report(&head, &splits.test, &cfg, a.n_pairs, a.n_dirs)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sensmap(a) => {
            let splits = a.head.splits()?;
            let (head, _) = train_probe(&splits, a.head.head.into(), &a.head.lgm())?;
            let test = &splits.test;
            if a.sample >= test.len() {
                bail!("--sample {} but the test split has {} rows", a.sample, test.len());
            }
            let (u, v) = random_plane(test.d, &mut rng::seeded(a.head.seed));
            let map = sensitivity_map(&head, test.row(a.sample), test.labels[a.sample], &u, &v, a.half_width, a.grid_n)?;
            map.write_csv(std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?)?;
            println!("correct fraction {:.4}", map.correct_fraction);
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(a) => {
            let kind: ExperimentKind = a.name.parse()?;
            let config = a.cfg.load(&[])?;
            let out = a.cfg.out_or(format!("{kind}-s{}", a.cfg.seed));
            let mut spec = ExperimentSpec::new(kind, config, a.cfg.seed, out.clone());
            spec.config_path = a.cfg.config.clone();
            let manifest = run_experiment(&spec)?;
            Ok(finish_run(&manifest, &out))
        }
        Command::Compare(a) => {
            let metric = MetricRef { column: a.metric, file_a: a.file_a, file_b: a.file_b };
            print_json(&compare_runs(&a.a, &a.b, &metric)?)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
