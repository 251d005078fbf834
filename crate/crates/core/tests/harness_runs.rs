use std::path::Path;

use noisetrap::harness::{
    compare_runs, curve_file_name, run_experiment, ExperimentConfig, ExperimentKind, ExperimentSpec, MetricRef, OutputDir, RunManifest, RunStatus,
    MANIFEST_FILE,
};
use noisetrap::lm::LmConfig;
use noisetrap::Error;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.corpus.synthetic_bytes = 40_000;
    c.corpus.val_tokens = 8_000;
    c.model = LmConfig { n_layers: 1, n_heads: 2, d_model: 8, context_len: 8, ..LmConfig::desk() };
    c.train.batch_size = 2;
    c.train.total_iters = 10;
    c.train.warmup_iters = 1;
    c.train.eval_interval = 5;
    c.train.eval_windows = 4;
    c.sweep.alphas = vec![0.0, 0.1];
    c.sweep.check_alpha = 0.1;
    c
}

fn sweep(dir: &Path, config: ExperimentConfig) -> RunManifest {
    run_experiment(&ExperimentSpec::new(ExperimentKind::NoiseSweep, config, 3, dir.to_path_buf())).unwrap()
}

#[test]
fn sweep_writes_hashed_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let m = sweep(tmp.path(), tiny());
    assert_eq!(m.status, RunStatus::Completed);
    for name in ["config.toml", "deltas.csv", "k.csv", "summary.json", &curve_file_name("uniform", 0.1, 3)] {
        assert!(m.file(name).is_some(), "{name} missing from manifest");
    }
    for check in ["disproportionality", "monotone", "noise_slow", "k_large"] {
        assert!(m.check(check).is_some(), "{check} not reported");
    }
    let (loaded, dir) = RunManifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(dir, tmp.path());
    let mut listed: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    let sorted = {
        let mut s = listed.clone();
        s.sort();
        s
    };
    assert_eq!(listed, sorted);
    listed.retain(|p| p.contains(".."));
    assert!(listed.is_empty());
}

#[test]
fn comparing_a_run_with_itself_gives_zero() {
    let tmp = tempfile::tempdir().unwrap();
    sweep(tmp.path(), tiny());
    let curve = curve_file_name("uniform", 0.1, 3);
    let r = compare_runs(tmp.path(), tmp.path(), &MetricRef::files("loss_clean_val", &curve, &curve)).unwrap();
    assert_eq!(r.rows.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![0, 5, 10]);
    assert!(r.rows.iter().all(|r| r.delta == 0.0));
    assert_eq!((r.final_delta, r.max_delta, r.mean_delta), (0.0, 0.0, 0.0));

    // two noise levels in one run: differences are the noise effect
    let clean = curve_file_name("uniform", 0.0, 3);
    let r = compare_runs(tmp.path(), tmp.path(), &MetricRef::files("loss_clean_val", &curve, &clean)).unwrap();
    assert!(r.rows.iter().all(|x| x.delta == x.a - x.b));
}

#[test]
fn ambiguous_or_misaligned_comparisons_are_errors() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    sweep(a.path(), tiny());
    let mut other = tiny();
    other.train.eval_interval = 4;
    sweep(b.path(), other);
    let curve = curve_file_name("uniform", 0.1, 3);
    let err = compare_runs(a.path(), b.path(), &MetricRef::files("loss_clean_val", &curve, &curve)).unwrap_err();
    assert!(matches!(err, Error::Alignment(_)), "{err}");
    let err = compare_runs(a.path(), a.path(), &MetricRef::column("loss_clean_val")).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn tampered_output_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    sweep(tmp.path(), tiny());
    let curve = curve_file_name("uniform", 0.1, 3);
    let path = tmp.path().join(&curve);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    let err = compare_runs(tmp.path(), tmp.path(), &MetricRef::files("loss_clean_val", &curve, &curve)).unwrap_err();
    assert!(matches!(err, Error::CorruptFile(_)), "{err}");
}

#[test]
fn failure_part_way_leaves_a_failed_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let features = tmp.path().join("bad.feat");
    std::fs::write(&features, b"not a feature file").unwrap();
    let mut c = ExperimentConfig::default();
    c.probe.features = Some(features);
    let out = tmp.path().join("run");
    let err = run_experiment(&ExperimentSpec::new(ExperimentKind::LgmProbe, c, 0, out.clone())).unwrap_err();
    let (m, _) = RunManifest::load(&out).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
    assert_eq!(m.error.as_deref(), Some(err.to_string().as_str()));
    assert!(m.file("config.toml").is_some());
    assert!(!m.passed());
}

#[test]
fn output_directory_stays_inside_its_root() {
    let tmp = tempfile::tempdir().unwrap();
    let mut out = OutputDir::create(tmp.path()).unwrap();
    for bad in ["../escape.csv", "/etc/x", MANIFEST_FILE] {
        assert!(out.write_with(bad, |w| Ok(w.write_all(b"x")?)).is_err(), "{bad} accepted");
    }
    out.write_with("nested/ok.csv", |w| Ok(w.write_all(b"x")?)).unwrap();
    assert!(tmp.path().join("nested/ok.csv").is_file());
    assert!(!tmp.path().parent().unwrap().join("escape.csv").exists());
}

#[test]
fn overrides_apply_on_top_of_the_file() {
    let text = "[train]\ntotal_iters = 50\n";
    let c = ExperimentConfig::from_toml_with(text, &["train.total_iters=7".into(), "sweep.alphas=[0.0, 0.3]".into()]).unwrap();
    assert_eq!(c.train.total_iters, 7);
    assert_eq!(c.sweep.alphas, vec![0.0, 0.3]);
    assert!(ExperimentConfig::from_toml_with(text, &["train.no_such_key=1".into()]).is_err());
}
