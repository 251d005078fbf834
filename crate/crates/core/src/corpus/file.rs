//! Token files: flat little-endian `u16`, no header, plus a `key=value` sidecar.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::{Origin, Provenance, TokenCorpus};
use crate::error::{Error, Result};
use crate::rng::PRNG_NAME;

/// `<path>.meta`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_token_file(corpus: &TokenCorpus, path: &Path) -> Result<()> {
    if corpus.vocab_size() > 1 << 16 {
        return Err(Error::Unsupported(format!("vocab_size {} does not fit in u16 tokens", corpus.vocab_size())));
    }
    let mut bytes = Vec::with_capacity(corpus.len() * 2);
    for &t in corpus.tokens() {
        let t = u16::try_from(t).map_err(|_| Error::Unsupported(format!("token {t} does not fit in u16")))?;
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fs::write(path, bytes)?;

    let p = corpus.provenance();
    let mut meta = Vec::new();
    writeln!(meta, "vocab_size={}", corpus.vocab_size())?;
    writeln!(meta, "origin={}", corpus.origin())?;
    if let Some(v) = p.alpha {
        writeln!(meta, "alpha={v}")?;
    }
    if let Some(v) = p.mu {
        writeln!(meta, "mu={v}")?;
    }
    if let Some(v) = p.sigma {
        writeln!(meta, "sigma={v}")?;
    }
    if let Some(v) = p.seed {
        writeln!(meta, "seed={v}")?;
    }
    if let Some(v) = p.noise_start {
        writeln!(meta, "noise_start={v}")?;
    }
    writeln!(meta, "prng_name={PRNG_NAME}")?;
    fs::write(sidecar_path(path), meta)?;
    Ok(())
}

/// Reads a token file. Without a sidecar the corpus is tagged clean.
pub fn read_token_file(path: &Path, vocab_size: usize) -> Result<TokenCorpus> {
    let bytes = fs::read(path)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::CorruptFile(format!("{}: odd length {}", path.display(), bytes.len())));
    }
    let tokens: Vec<u32> = bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as u32).collect();

    let meta_path = sidecar_path(path);
    let (origin, provenance) = if meta_path.exists() {
        parse_sidecar(&fs::read_to_string(&meta_path)?, vocab_size)?
    } else {
        (Origin::Clean, Provenance::default())
    };
    TokenCorpus::with_provenance(vocab_size, tokens, origin, provenance)
        .map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))
}

fn parse_sidecar(text: &str, vocab_size: usize) -> Result<(Origin, Provenance)> {
    let corrupt = |msg: String| Error::CorruptFile(format!("sidecar: {msg}"));
    let mut origin = Origin::Clean;
    let mut p = Provenance::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| corrupt(format!("malformed line {line:?}")))?;
        let float = || value.parse::<f64>().map_err(|_| corrupt(format!("bad number for {key}: {value:?}")));
        match key {
            "vocab_size" => {
                let declared: usize = value.parse().map_err(|_| corrupt(format!("bad vocab_size {value:?}")))?;
                if declared != vocab_size {
                    return Err(corrupt(format!("declares vocab_size {declared}, expected {vocab_size}")));
                }
            }
            "origin" => origin = value.parse()?,
            "alpha" => p.alpha = Some(float()?),
            "mu" => p.mu = Some(float()?),
            "sigma" => p.sigma = Some(float()?),
            "seed" => p.seed = Some(value.parse().map_err(|_| corrupt(format!("bad seed {value:?}")))?),
            "noise_start" => p.noise_start = Some(value.parse().map_err(|_| corrupt(format!("bad noise_start {value:?}")))?),
            // prng_name and unknown keys are informational
            _ => {}
        }
    }
    Ok((origin, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn little_endian_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let c = TokenCorpus::new(300, vec![1, 258], Origin::Clean).unwrap();
        write_token_file(&c, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), [0x01, 0x00, 0x02, 0x01]);
        assert_eq!(read_token_file(&path, 300).unwrap(), c);
    }

    #[test]
    fn odd_length_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        fs::write(&path, [1u8, 0, 2]).unwrap();
        assert!(matches!(read_token_file(&path, 256), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn oversized_vocabulary_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let c = TokenCorpus::new(70_000, vec![65_536], Origin::Clean).unwrap();
        assert!(matches!(write_token_file(&c, &dir.path().join("t.bin")), Err(Error::Unsupported(_))));
    }

    #[test]
    fn empty_file_reads_as_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        fs::write(&path, []).unwrap();
        assert!(read_token_file(&path, 256).unwrap().is_empty());
    }
}
