//! Frozen features for downstream probes.

use std::io::Write as _;
use std::path::Path;

use super::model::LmParams;
use crate::error::{invalid, Result};

/// Final-layer post-norm hidden state at the last position of each window.
pub fn extract_features(params: &LmParams, windows: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
    let d = params.config.d_model;
    let mut out = Vec::with_capacity(windows.len());
    let mut i = 0;
    while i < windows.len() {
        let len = windows[i].len();
        if len == 0 {
            return invalid(format!("window {i} is empty"));
        }
        // batch consecutive windows of equal length
        let mut j = i + 1;
        while j < windows.len() && j - i < 32 && windows[j].len() == len {
            j += 1;
        }
        let inputs: Vec<u32> = windows[i..j].iter().flat_map(|w| w.iter().copied()).collect();
        let cache = params.forward(&inputs, j - i, None)?;
        for b in 0..j - i {
            out.push(cache.hidden(b, len - 1, d).to_vec());
        }
        i = j;
    }
    Ok(out)
}

/// Writes `d=<d> C=<classes> n=<rows>\n`, the rows as little-endian `f32`,
/// then the labels as little-endian `u16`.
pub fn write_feature_file(path: &Path, features: &[Vec<f32>], labels: &[u16], num_classes: usize) -> Result<()> {
    let d = features.first().map_or(0, Vec::len);
    if features.len() != labels.len() {
        return invalid(format!("{} feature rows but {} labels", features.len(), labels.len()));
    }
    if features.iter().any(|f| f.len() != d) {
        return invalid("feature rows differ in length");
    }
    if let Some(bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
        return invalid(format!("label {bad} outside {num_classes} classes"));
    }
    let mut bytes = Vec::with_capacity(32 + features.len() * (4 * d + 2));
    writeln!(bytes, "d={d} C={num_classes} n={}", features.len())?;
    for row in features {
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for y in labels {
        bytes.extend_from_slice(&y.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
