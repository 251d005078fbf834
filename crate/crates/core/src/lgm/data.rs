//! Feature datasets: the binary feature-file reader and synthetic class blobs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::head::ProbeBatch;
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub d: usize,
    pub classes: usize,
    /// Row-major `n × d`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl FeatureDataset {
    pub fn new(d: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if d == 0 || classes < 2 {
            return invalid(format!("need d >= 1 and at least 2 classes, got d={d}, C={classes}"));
        }
        if features.len() != d * labels.len() {
            return invalid(format!("{} feature values do not form {} rows of {d}", features.len(), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return invalid(format!("label {bad} outside {classes} classes"));
        }
        Ok(Self { d, classes, features, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn as_batch(&self) -> Result<ProbeBatch> {
        ProbeBatch::new(self.d, self.features.clone(), self.labels.clone())
    }

    pub fn gather(&self, indices: &[usize]) -> Result<ProbeBatch> {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        ProbeBatch::new(self.d, features, indices.iter().map(|&i| self.labels[i]).collect())
    }

    fn subset(&self, indices: &[usize], split: Split) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self { d: self.d, classes: self.classes, features, labels: indices.iter().map(|&i| self.labels[i]).collect(), split }
    }

    /// Shuffles once and cuts into train / val / test by the given fractions.
    pub fn split_three(&self, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<FeatureSplits> {
        if !(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0) {
            return invalid(format!("bad split fractions {val_fraction}, {test_fraction}"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::seeded(seed));
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (val, rest) = idx.split_at(n_val);
        let (test, train) = rest.split_at(n_test);
        if train.is_empty() || val.is_empty() || test.is_empty() {
            return invalid(format!("{} rows are too few for a three-way split", self.len()));
        }
        Ok(FeatureSplits { train: self.subset(train, Split::Train), val: self.subset(val, Split::Val), test: self.subset(test, Split::Test) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSplits {
    pub train: FeatureDataset,
    pub val: FeatureDataset,
    pub test: FeatureDataset,
}

/// Reads the format written by [`crate::lm::write_feature_file`].
pub fn read_feature_file(path: &Path) -> Result<FeatureDataset> {
    let bytes = std::fs::read(path)?;
    let corrupt = |msg: String| Error::CorruptFile(format!("{}: {msg}", path.display()));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("header is not text".into()))?;
    let (mut d, mut c, mut n) = (None, None, None);
    for field in header.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| corrupt(format!("bad header field {field:?}")))?;
        let value: usize = value.parse().map_err(|_| corrupt(format!("bad header value {field:?}")))?;
        match key {
            "d" => d = Some(value),
            "C" => c = Some(value),
            "n" => n = Some(value),
            _ => return Err(corrupt(format!("unknown header key {key:?}"))),
        }
    }
    let (Some(d), Some(c), Some(n)) = (d, c, n) else {
        return Err(corrupt(format!("header {header:?} lacks d, C or n")));
    };
    let body = &bytes[nl + 1..];
    if body.len() != n * d * 4 + n * 2 {
        return Err(corrupt(format!("expected {} payload bytes, found {}", n * d * 4 + n * 2, body.len())));
    }
    let (rows, labels) = body.split_at(n * d * 4);
    let features = rows.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    let labels = labels.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as usize).collect();
    FeatureDataset::new(d, c, features, labels, Split::Train).map_err(|e| corrupt(e.to_string()))
}

/// Isotropic Gaussian class blobs, optionally corrupted by extra feature noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobSpec {
    pub d: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Norm of each class mean.
    pub separation: f64,
    /// Within-class standard deviation.
    pub spread: f64,
    /// Standard deviation of additional noise on every feature.
    pub corruption: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { d: 16, classes: 4, n_train: 1000, n_val: 250, n_test: 1000, separation: 3.0, spread: 1.0, corruption: 0.5 }
    }
}

pub fn gaussian_blobs(spec: &BlobSpec, seed: u64) -> Result<FeatureSplits> {
    if spec.d == 0 || spec.classes < 2 || spec.n_train == 0 || spec.n_val == 0 || spec.n_test == 0 {
        return invalid("blobs need d >= 1, C >= 2 and non-empty splits");
    }
    let mut r = rng::seeded(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut r) };
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.d).map(|_| normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x * spec.separation / n).collect()
        })
        .collect();
    let mut make = |count: usize, split: Split| {
        let mut features = Vec::with_capacity(count * spec.d);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let y = i % spec.classes;
            for &m in &means[y] {
                features.push(m + spec.spread * normal() + spec.corruption * normal());
            }
            labels.push(y);
        }
        FeatureDataset::new(spec.d, spec.classes, features, labels, split)
    };
    Ok(FeatureSplits { train: make(spec.n_train, Split::Train)?, val: make(spec.n_val, Split::Val)?, test: make(spec.n_test, Split::Test)? })
}
