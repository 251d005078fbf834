//! Output directories that only accept plain relative file names, and the
//! run manifest listing every file they produced.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Component, Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentSpec;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HASH_ALGORITHM: &str = "sha256";

/// Environment variable naming the root under which runs are written by default.
pub const OUTPUT_ROOT_VAR: &str = "NOISETRAP_OUT";

/// `$NOISETRAP_OUT`, or `runs` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// A directory that files are written into by relative name only.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let probe = root.join(".noisetrap-write-test");
        fs::write(&probe, b"")?;
        fs::remove_file(&probe)?;
        Ok(Self { root: root.to_path_buf(), files: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolves `name` inside the directory. Absolute paths, `..` and the
    /// manifest's own name are refused.
    pub fn path(&self, name: &str) -> Result<PathBuf> {
        let rel = Path::new(name);
        let plain = !name.is_empty() && rel.components().all(|c| matches!(c, Component::Normal(_)));
        if !plain {
            return Err(Error::InvalidArgument(format!("output name {name:?} must be a relative path without '..'")));
        }
        if name == MANIFEST_FILE {
            return Err(Error::InvalidArgument(format!("{MANIFEST_FILE} is reserved")));
        }
        Ok(self.root.join(rel))
    }

    /// Creates `name` (and its parent directories), hands a buffered writer to
    /// `fill`, and records the file for the manifest.
    pub fn write_with<T>(&mut self, name: &str, fill: impl FnOnce(&mut dyn io::Write) -> Result<T>) -> Result<T> {
        let path = self.path(name)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = io::BufWriter::new(fs::File::create(&path)?);
        let out = fill(&mut w)?;
        w.flush()?;
        self.files.insert(name.to_string(), path);
        Ok(out)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    /// Records a file some other writer already put at [`OutputDir::path`].
    pub fn register(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.path(name)?;
        if !path.is_file() {
            return Err(Error::InvalidArgument(format!("{} was not written", path.display())));
        }
        self.files.insert(name.to_string(), path.clone());
        Ok(path)
    }

    fn hashed_files(&self) -> Result<Vec<FileEntry>> {
        self.files
            .iter()
            .map(|(name, path)| {
                let bytes = fs::read(path)?;
                Ok(FileEntry { path: name.clone(), bytes: bytes.len() as u64, hash: hex::encode(Sha256::digest(&bytes)) })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub bytes: u64,
    pub hash: String,
}

/// A named pass/fail outcome embedded in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: ExperimentSpec,
    pub prng_name: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub hash_algorithm: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub checks: Vec<Check>,
    /// Sorted by path.
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    /// True when the run completed and every embedded check held.
    pub fn passed(&self) -> bool {
        self.status == RunStatus::Completed && self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }

    /// Reads `manifest.json` from `path`, which may be the file or its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file)?;
        let manifest = serde_json::from_str(&text).map_err(|e| Error::CorruptFile(format!("{}: {e}", file.display())))?;
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, dir))
    }
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub(crate) fn finish(
    out: &OutputDir,
    spec: &ExperimentSpec,
    started_unix: u64,
    checks: Vec<Check>,
    error: Option<String>,
) -> Result<RunManifest> {
    let manifest = RunManifest {
        spec: spec.clone(),
        prng_name: crate::rng::PRNG_NAME.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix,
        finished_unix: unix_now(),
        hash_algorithm: HASH_ALGORITHM.to_string(),
        status: if error.is_some() { RunStatus::Failed } else { RunStatus::Completed },
        error,
        checks,
        files: out.hashed_files()?,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(out.root().join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_cannot_escape() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(dir.path()).unwrap();
        for bad in ["", "../x.csv", "/tmp/x.csv", "a/../../x", "./x", MANIFEST_FILE] {
            assert!(out.path(bad).is_err(), "{bad}");
        }
        assert_eq!(out.path("sub/x.csv").unwrap(), dir.path().join("sub/x.csv"));
    }

    #[test]
    fn written_files_are_hashed() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write_with("a/b.txt", |w| Ok(w.write_all(b"abc")?)).unwrap();
        let files = out.hashed_files().unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(files[0].hash, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(files[0].bytes, 3);
    }
}
