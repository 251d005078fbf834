//! Clean and noisy token corpora: generation, mixing, storage, batch sampling.
//!
//! Noise is appended after the clean tokens, so a mixed corpus carries the
//! index where its noise region starts. Training windows are drawn uniformly
//! over the whole mixed stream.

mod file;
mod synthetic;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use num_rational::Ratio;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};

pub use file::{read_token_file, sidecar_path, write_token_file};
pub use synthetic::{synthetic_text, TextStyle};

/// Where the tokens of a corpus came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Clean,
    UniformNoise,
    GaussianNoise,
    Mixed,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Clean => "clean",
            Origin::UniformNoise => "uniform_noise",
            Origin::GaussianNoise => "gaussian_noise",
            Origin::Mixed => "mixed",
        })
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Origin::Clean),
            "uniform_noise" => Ok(Origin::UniformNoise),
            "gaussian_noise" => Ok(Origin::GaussianNoise),
            "mixed" => Ok(Origin::Mixed),
            other => Err(Error::CorruptFile(format!("unknown origin {other:?}"))),
        }
    }
}

/// Generation parameters carried alongside a corpus and written to its sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    /// First token index of the appended noise in a mixed corpus.
    pub noise_start: Option<usize>,
}

/// An immutable token stream over a vocabulary `[0, vocab_size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCorpus {
    vocab_size: usize,
    tokens: Vec<u32>,
    origin: Origin,
    provenance: Provenance,
}

impl TokenCorpus {
    pub fn new(vocab_size: usize, tokens: Vec<u32>, origin: Origin) -> Result<Self> {
        Self::with_provenance(vocab_size, tokens, origin, Provenance::default())
    }

    pub fn with_provenance(vocab_size: usize, tokens: Vec<u32>, origin: Origin, provenance: Provenance) -> Result<Self> {
        if vocab_size == 0 {
            return invalid("vocab_size must be positive");
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return invalid(format!("token {bad} outside vocabulary of size {vocab_size}"));
        }
        if let Some(start) = provenance.noise_start {
            if start > tokens.len() {
                return invalid(format!("noise_start {start} beyond corpus length {}", tokens.len()));
            }
        }
        Ok(Self { vocab_size, tokens, origin, provenance })
    }

    /// Byte-level corpus (V = 256) over raw bytes, e.g. a text file.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self { vocab_size: 256, tokens: bytes.iter().map(|&b| b as u32).collect(), origin: Origin::Clean, provenance: Provenance::default() }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Token range holding appended noise; empty for unmixed corpora.
    pub fn noise_region(&self) -> Range<usize> {
        match (self.origin, self.provenance.noise_start) {
            (Origin::Mixed, Some(start)) => start..self.tokens.len(),
            (Origin::UniformNoise | Origin::GaussianNoise, _) => 0..self.tokens.len(),
            _ => self.tokens.len()..self.tokens.len(),
        }
    }

    /// Splits off the last `tail` tokens, e.g. to hold out a validation set.
    pub fn split_tail(self, tail: usize) -> Result<(TokenCorpus, TokenCorpus)> {
        if tail > self.tokens.len() {
            return invalid(format!("cannot split {tail} tokens from a corpus of {}", self.tokens.len()));
        }
        let mut head = self.tokens;
        let rest = head.split_off(head.len() - tail);
        let mk = |tokens| TokenCorpus { vocab_size: self.vocab_size, tokens, origin: self.origin, provenance: self.provenance.clone() };
        Ok((mk(head), mk(rest)))
    }

    /// Empirical unigram entropy in nats.
    pub fn unigram_entropy(&self) -> f64 {
        let mut counts = vec![0u64; self.vocab_size];
        for &t in &self.tokens {
            counts[t as usize] += 1;
        }
        let n = self.tokens.len() as f64;
        counts.iter().filter(|&&c| c > 0).map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        }).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Uniform,
    Gaussian { mu: f64, sigma: f64 },
}

/// What noise to generate and how much of the mixed corpus it should occupy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub alpha: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn uniform(alpha: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::Uniform, alpha, seed }
    }

    /// Gaussian noise centred on `(V-1)/2` with the default width `V/100`.
    pub fn gaussian_default(vocab_size: usize, alpha: f64, seed: u64) -> Self {
        let mu = (vocab_size as f64 - 1.0) / 2.0;
        let sigma = vocab_size as f64 / 100.0;
        Self { kind: NoiseKind::Gaussian { mu, sigma }, alpha, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return invalid(format!("alpha {} outside [0, 1)", self.alpha));
        }
        if let NoiseKind::Gaussian { sigma, mu } = self.kind {
            if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
                return invalid(format!("gaussian noise needs finite mu and sigma > 0, got mu={mu} sigma={sigma}"));
            }
        }
        Ok(())
    }

    pub fn generate(&self, vocab_size: usize, count: usize) -> Result<TokenCorpus> {
        self.validate()?;
        let mut corpus = match self.kind {
            NoiseKind::Uniform => gen_uniform_noise(vocab_size, count, self.seed)?,
            NoiseKind::Gaussian { mu, sigma } => gen_gaussian_noise(vocab_size, count, mu, sigma, self.seed)?,
        };
        corpus.provenance.alpha = Some(self.alpha);
        Ok(corpus)
    }

    /// Generates exactly enough noise for `clean` to reach `alpha` and appends it.
    pub fn contaminate(&self, clean: &TokenCorpus) -> Result<TokenCorpus> {
        self.validate()?;
        let count = noise_len_for(clean.len(), self.alpha)?;
        if count == 0 {
            let mut out = clean.clone();
            out.origin = Origin::Mixed;
            out.provenance.alpha = Some(0.0);
            out.provenance.noise_start = Some(clean.len());
            return Ok(out);
        }
        mix_corpora(clean, &self.generate(clean.vocab_size(), count)?)
    }
}

/// `count` tokens i.i.d. uniform on `{0, …, V-1}`.
pub fn gen_uniform_noise(vocab_size: usize, count: usize, seed: u64) -> Result<TokenCorpus> {
    if vocab_size == 0 || count == 0 {
        return invalid(format!("need positive vocab_size and count, got {vocab_size} and {count}"));
    }
    let mut rng = rng::seeded(seed);
    let tokens = (0..count).map(|_| rng.random_range(0..vocab_size as u32)).collect();
    let provenance = Provenance { seed: Some(seed), ..Provenance::default() };
    TokenCorpus::with_provenance(vocab_size, tokens, Origin::UniformNoise, provenance)
}

/// `count` tokens `clip(round(z), 0, V-1)` with `z ~ N(mu, sigma²)`, rounding half away from zero.
pub fn gen_gaussian_noise(vocab_size: usize, count: usize, mu: f64, sigma: f64, seed: u64) -> Result<TokenCorpus> {
    if vocab_size == 0 || count == 0 {
        return invalid(format!("need positive vocab_size and count, got {vocab_size} and {count}"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return invalid(format!("need finite mu and sigma > 0, got mu={mu} sigma={sigma}"));
    }
    let mut rng = rng::seeded(seed);
    let top = (vocab_size - 1) as f64;
    let tokens = (0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (mu + sigma * z).round().clamp(0.0, top) as u32
        })
        .collect();
    let provenance = Provenance { seed: Some(seed), mu: Some(mu), sigma: Some(sigma), ..Provenance::default() };
    TokenCorpus::with_provenance(vocab_size, tokens, Origin::GaussianNoise, provenance)
}

/// Clean tokens followed by noise tokens.
pub fn mix_corpora(clean: &TokenCorpus, noise: &TokenCorpus) -> Result<TokenCorpus> {
    if clean.vocab_size != noise.vocab_size {
        return invalid(format!("vocabulary mismatch: {} vs {}", clean.vocab_size, noise.vocab_size));
    }
    let mut tokens = Vec::with_capacity(clean.len() + noise.len());
    tokens.extend_from_slice(&clean.tokens);
    tokens.extend_from_slice(&noise.tokens);
    let total = tokens.len();
    let provenance = Provenance {
        seed: noise.provenance.seed,
        alpha: if total > 0 { Some(noise.len() as f64 / total as f64) } else { None },
        mu: noise.provenance.mu,
        sigma: noise.provenance.sigma,
        noise_start: Some(clean.len()),
    };
    let origin = if noise.is_empty() && clean.origin != Origin::Mixed { clean.origin } else { Origin::Mixed };
    let provenance = if noise.is_empty() { clean.provenance.clone() } else { provenance };
    Ok(TokenCorpus { vocab_size: clean.vocab_size, tokens, origin, provenance })
}

/// `noise_len / (clean_len + noise_len)`.
pub fn noise_fraction(clean_len: u64, noise_len: u64) -> Result<f64> {
    let total = clean_len as u128 + noise_len as u128;
    if total == 0 {
        return invalid("both corpora are empty");
    }
    Ok(noise_len as f64 / total as f64)
}

/// Noise length reaching fraction `alpha` over `clean_len` clean tokens:
/// `ceil(alpha / (1 - alpha) · clean_len)`.
///
/// `alpha` is first recovered as the simplest rational within float precision
/// (so `0.05` is treated as `1/20`), then the ceiling is taken exactly.
pub fn noise_len_for(clean_len: usize, alpha: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&alpha) {
        return invalid(format!("alpha {alpha} outside [0, 1)"));
    }
    if alpha == 0.0 {
        return Ok(0);
    }
    let ratio = Ratio::<i64>::approximate_float(alpha).ok_or_else(|| Error::InvalidArgument(format!("alpha {alpha} has no rational form")))?;
    let (p, q) = (*ratio.numer() as i128, *ratio.denom() as i128);
    let num = p * clean_len as i128;
    let den = q - p;
    Ok(((num + den - 1) / den) as usize)
}

/// A `batch × len` grid of input windows and their shift-by-one targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub context_len: usize,
    pub offsets: Vec<usize>,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn input_row(&self, b: usize) -> &[u32] {
        &self.inputs[b * self.context_len..(b + 1) * self.context_len]
    }

    pub fn target_row(&self, b: usize) -> &[u32] {
        &self.targets[b * self.context_len..(b + 1) * self.context_len]
    }

    /// Windows starting at the given offsets.
    pub fn from_offsets(corpus: &TokenCorpus, context_len: usize, offsets: Vec<usize>) -> Result<Self> {
        if context_len == 0 || offsets.is_empty() {
            return invalid("context_len and batch size must be positive");
        }
        if let Some(&bad) = offsets.iter().find(|&&o| o + context_len + 1 > corpus.len()) {
            return invalid(format!("window at {bad} of length {context_len} overruns corpus of {}", corpus.len()));
        }
        let mut inputs = Vec::with_capacity(offsets.len() * context_len);
        let mut targets = Vec::with_capacity(offsets.len() * context_len);
        for &o in &offsets {
            inputs.extend_from_slice(&corpus.tokens[o..o + context_len]);
            targets.extend_from_slice(&corpus.tokens[o + 1..o + 1 + context_len]);
        }
        Ok(Self { batch_size: offsets.len(), context_len, offsets, inputs, targets })
    }
}

/// Draws `batch_size` windows with offsets uniform on `[0, len - context_len - 1]`, with replacement.
pub fn sample_batch(corpus: &TokenCorpus, context_len: usize, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
    sample_batch_in(corpus, 0..corpus.len(), context_len, batch_size, rng)
}

/// As [`sample_batch`], restricted to windows lying fully inside `region`.
pub fn sample_batch_in(corpus: &TokenCorpus, region: Range<usize>, context_len: usize, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
    if context_len == 0 || batch_size == 0 {
        return invalid("context_len and batch_size must be positive");
    }
    if region.end > corpus.len() || region.end < region.start + context_len + 1 {
        return invalid(format!("region {region:?} cannot hold a window of {} tokens", context_len + 1));
    }
    let last = region.end - context_len - 1;
    let offsets = (0..batch_size).map(|_| rng.random_range(region.start..=last)).collect();
    Batch::from_offsets(corpus, context_len, offsets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_noise_is_reproducible_and_in_range() {
        let a = gen_uniform_noise(50256, 5, 7).unwrap();
        let b = gen_uniform_noise(50256, 5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.tokens().iter().all(|&t| t < 50256));
        assert_eq!(a.origin(), Origin::UniformNoise);
    }

    #[test]
    fn single_symbol_vocabulary() {
        assert_eq!(gen_uniform_noise(1, 3, 0).unwrap().tokens(), &[0, 0, 0]);
    }

    #[test]
    fn noise_generators_reject_bad_arguments() {
        assert!(gen_uniform_noise(0, 3, 0).is_err());
        assert!(gen_uniform_noise(4, 0, 0).is_err());
        assert!(gen_gaussian_noise(4, 3, 1.0, 0.0, 0).is_err());
        assert!(gen_gaussian_noise(4, 3, 1.0, -1.0, 0).is_err());
    }

    #[test]
    fn degenerate_sigma_collapses_onto_the_nearest_integer() {
        let c = gen_gaussian_noise(50256, 4, 25127.3, 1e-9, 1).unwrap();
        assert_eq!(c.tokens(), &[25127; 4]);
        // at an exact half-integer the sign of the draw decides
        let c = gen_gaussian_noise(50256, 64, 25127.5, 1e-9, 1).unwrap();
        assert!(c.tokens().iter().all(|&t| t == 25127 || t == 25128));
    }

    #[test]
    fn gaussian_noise_clips_into_vocabulary() {
        let c = gen_gaussian_noise(10, 1000, 0.0, 50.0, 3).unwrap();
        assert!(c.tokens().iter().all(|&t| t < 10));
        assert!(c.tokens().contains(&0) && c.tokens().contains(&9));
    }

    #[test]
    fn mixing_appends_noise() {
        let clean = TokenCorpus::new(8, vec![1; 95], Origin::Clean).unwrap();
        let noise = TokenCorpus::new(8, vec![7; 5], Origin::UniformNoise).unwrap();
        let mixed = mix_corpora(&clean, &noise).unwrap();
        assert_eq!(mixed.len(), 100);
        assert_eq!(&mixed.tokens()[95..], &[7; 5]);
        assert_eq!(mixed.noise_region(), 95..100);
        assert_eq!(mixed.origin(), Origin::Mixed);
    }

    #[test]
    fn mixing_with_empty_noise_is_identity() {
        let clean = TokenCorpus::new(8, vec![1, 2, 3], Origin::Clean).unwrap();
        let empty = TokenCorpus::new(8, vec![], Origin::UniformNoise).unwrap();
        assert_eq!(mix_corpora(&clean, &empty).unwrap(), clean);
    }

    #[test]
    fn mixing_rejects_vocab_mismatch() {
        let a = TokenCorpus::new(8, vec![1], Origin::Clean).unwrap();
        let b = TokenCorpus::new(9, vec![1], Origin::UniformNoise).unwrap();
        assert!(mix_corpora(&a, &b).is_err());
    }

    #[test]
    fn noise_fraction_values() {
        assert!((noise_fraction(95, 5).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(noise_fraction(100, 0).unwrap(), 0.0);
        assert!((noise_fraction(8_000_000_000, 421_052_632).unwrap() - 0.05).abs() < 1e-9);
        assert!(noise_fraction(0, 0).is_err());
    }

    #[test]
    fn required_noise_length_at_scale() {
        // 0.05/0.95 * 8e9 = 421052631.57…
        assert_eq!(noise_len_for(8_000_000_000, 0.05).unwrap(), 421_052_632);
        assert_eq!(noise_len_for(100, 0.2).unwrap(), 25);
        assert_eq!(noise_len_for(95, 0.05).unwrap(), 5);
        assert_eq!(noise_len_for(100, 0.0).unwrap(), 0);
        assert!(noise_len_for(100, 1.0).is_err());
    }

    #[test]
    fn single_valid_offset() {
        let c = TokenCorpus::new(16, (0..9).collect(), Origin::Clean).unwrap();
        let mut rng = rng::seeded(0);
        let b = sample_batch(&c, 8, 4, &mut rng).unwrap();
        assert!(b.offsets.iter().all(|&o| o == 0));
        assert_eq!(b.input_row(3), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(b.target_row(3), &[1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn short_corpus_rejected() {
        let c = TokenCorpus::new(16, (0..8).collect(), Origin::Clean).unwrap();
        assert!(sample_batch(&c, 8, 1, &mut rng::seeded(0)).is_err());
        let empty = TokenCorpus::new(16, vec![], Origin::Clean).unwrap();
        assert!(sample_batch(&empty, 1, 1, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn contaminate_hits_alpha() {
        let clean = synthetic_text(20_000, 3, TextStyle::default());
        let mixed = NoiseSpec::uniform(0.05, 1).contaminate(&clean).unwrap();
        let noise = mixed.noise_region().len() as u64;
        let alpha = noise_fraction(clean.len() as u64, noise).unwrap();
        assert!((alpha - 0.05).abs() <= 1.0 / mixed.len() as f64);
        assert_eq!(&mixed.tokens()[..clean.len()], clean.tokens());
    }
}
