//! Differences of one metric column between two runs, aligned by iteration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::output::RunManifest;
use crate::error::{Error, Result};

/// Column `column` of `file_a` in run A against `file_b` in run B.
///
/// A file left as `None` is found by looking for the single CSV in the
/// manifest that has both an `iter` and a `column` column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricRef {
    pub column: String,
    pub file_a: Option<String>,
    pub file_b: Option<String>,
}

impl MetricRef {
    pub fn column(column: &str) -> Self {
        Self { column: column.to_string(), file_a: None, file_b: None }
    }

    pub fn files(column: &str, file_a: &str, file_b: &str) -> Self {
        Self { column: column.to_string(), file_a: Some(file_a.to_string()), file_b: Some(file_b.to_string()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub iter: u64,
    pub a: f64,
    pub b: f64,
    /// `a − b`
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub metric: MetricRef,
    pub file_a: String,
    pub file_b: String,
    pub rows: Vec<DeltaRow>,
    pub final_delta: f64,
    /// Delta of largest magnitude, sign kept.
    pub max_delta: f64,
    pub mean_delta: f64,
}

type Series = Vec<(u64, Option<f64>)>;

fn read_series(path: &Path, column: &str) -> Result<Option<Series>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let (Some(it), Some(col)) = (headers.iter().position(|h| h == "iter"), headers.iter().position(|h| h == column)) else {
        return Ok(None);
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |v: &str| Error::CorruptFile(format!("{}: bad value {v:?}", path.display()));
        let iter = rec[it].parse().map_err(|_| bad(&rec[it]))?;
        let value = if rec[col].is_empty() { None } else { Some(rec[col].parse().map_err(|_| bad(&rec[col]))?) };
        out.push((iter, value));
    }
    Ok(Some(out))
}

fn locate(manifest: &RunManifest, dir: &Path, file: Option<&str>, column: &str) -> Result<(String, Series)> {
    let verified = |name: &str| -> Result<std::path::PathBuf> {
        let entry = manifest.file(name).ok_or_else(|| Error::InvalidArgument(format!("manifest in {} does not list {name}", dir.display())))?;
        let path = dir.join(name);
        let hash = hex::encode(Sha256::digest(std::fs::read(&path)?));
        if hash != entry.hash {
            return Err(Error::CorruptFile(format!("{} does not match its manifest hash", path.display())));
        }
        Ok(path)
    };
    if let Some(name) = file {
        let series = read_series(&verified(name)?, column)?
            .ok_or_else(|| Error::InvalidArgument(format!("{name} has no iter and {column} columns")))?;
        return Ok((name.to_string(), series));
    }
    let mut found = Vec::new();
    for f in manifest.files.iter().filter(|f| f.path.ends_with(".csv")) {
        if let Some(series) = read_series(&verified(&f.path)?, column)? {
            found.push((f.path.clone(), series));
        }
    }
    match found.len() {
        1 => Ok(found.pop().unwrap()),
        0 => Err(Error::InvalidArgument(format!("no CSV in {} has iter and {column} columns", dir.display()))),
        _ => {
            let names: Vec<String> = found.into_iter().map(|(n, _)| n).collect();
            Err(Error::InvalidArgument(format!("{column} appears in several files of {}: {}; name one", dir.display(), names.join(", "))))
        }
    }
}

/// Reads both manifests (files or their directories), checks the selected
/// files against their recorded hashes, and differences the metric at each
/// iteration. The two runs must have evaluated at exactly the same
/// iterations and have values at all of them.
pub fn compare_runs(manifest_a: &Path, manifest_b: &Path, metric: &MetricRef) -> Result<DeltaReport> {
    let (ma, dir_a) = RunManifest::load(manifest_a)?;
    let (mb, dir_b) = RunManifest::load(manifest_b)?;
    let (file_a, sa) = locate(&ma, &dir_a, metric.file_a.as_deref(), &metric.column)?;
    let (file_b, sb) = locate(&mb, &dir_b, metric.file_b.as_deref(), &metric.column)?;
    let ia: Vec<u64> = sa.iter().map(|p| p.0).collect();
    let ib: Vec<u64> = sb.iter().map(|p| p.0).collect();
    if ia != ib {
        return Err(Error::Alignment(format!("evaluation iterations differ: {ia:?} vs {ib:?}")));
    }
    if ia.is_empty() {
        return Err(Error::Alignment("no evaluations to compare".into()));
    }
    let mut rows = Vec::with_capacity(sa.len());
    for ((iter, a), (_, b)) in sa.into_iter().zip(sb) {
        let (Some(a), Some(b)) = (a, b) else {
            return Err(Error::Alignment(format!("{} missing at iteration {iter}", metric.column)));
        };
        rows.push(DeltaRow { iter, a, b, delta: a - b });
    }
    let final_delta = rows.last().unwrap().delta;
    let max_delta = rows.iter().map(|r| r.delta).fold(0.0, |m: f64, d| if d.abs() > m.abs() { d } else { m });
    let mean_delta = rows.iter().map(|r| r.delta).sum::<f64>() / rows.len() as f64;
    Ok(DeltaReport { metric: metric.clone(), file_a, file_b, rows, final_delta, max_delta, mean_delta })
}
