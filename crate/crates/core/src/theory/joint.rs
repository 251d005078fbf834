//! Finite joint distributions over (prefix, token) cells and their NTP losses.

use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{invalid, Error, Result};

/// Tolerance on total mass for float tables.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// A joint distribution `P(x, w)` over `prefixes × vocab_size` cells, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    prefixes: usize,
    vocab_size: usize,
    prob: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(prefixes: usize, vocab_size: usize, prob: Vec<f64>) -> Result<Self> {
        if prefixes == 0 || vocab_size == 0 || prob.len() != prefixes * vocab_size {
            return invalid(format!("need a positive {prefixes}x{vocab_size} table, got {} cells", prob.len()));
        }
        if let Some(bad) = prob.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return invalid(format!("negative or non-finite mass {bad}"));
        }
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return invalid(format!("total mass {total} differs from 1"));
        }
        Ok(Self { prefixes, vocab_size, prob })
    }

    /// All mass on the single cell `(x, w)`.
    pub fn point(prefixes: usize, vocab_size: usize, x: usize, w: usize) -> Result<Self> {
        if x >= prefixes || w >= vocab_size {
            return invalid(format!("cell ({x}, {w}) outside {prefixes}x{vocab_size}"));
        }
        let mut prob = vec![0.0; prefixes * vocab_size];
        prob[x * vocab_size + w] = 1.0;
        Self::new(prefixes, vocab_size, prob)
    }

    pub fn prefixes(&self) -> usize {
        self.prefixes
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prob(&self, x: usize, w: usize) -> f64 {
        self.prob[x * self.vocab_size + w]
    }

    pub fn table(&self) -> &[f64] {
        &self.prob
    }

    pub fn total_mass(&self) -> f64 {
        self.prob.iter().sum()
    }

    pub fn marginal(&self, x: usize) -> f64 {
        self.row(x).iter().sum()
    }

    /// `P(· | x)`, or `None` where `P_X(x) = 0`.
    pub fn conditional(&self, x: usize) -> Option<Vec<f64>> {
        let m = self.marginal(x);
        (m > 0.0).then(|| self.row(x).iter().map(|p| p / m).collect())
    }

    fn row(&self, x: usize) -> &[f64] {
        &self.prob[x * self.vocab_size..(x + 1) * self.vocab_size]
    }
}

/// A joint distribution with exact rational cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactJoint {
    prefixes: usize,
    vocab_size: usize,
    prob: Vec<BigRational>,
}

impl ExactJoint {
    pub fn new(prefixes: usize, vocab_size: usize, prob: Vec<BigRational>) -> Result<Self> {
        if prefixes == 0 || vocab_size == 0 || prob.len() != prefixes * vocab_size {
            return invalid(format!("need a positive {prefixes}x{vocab_size} table, got {} cells", prob.len()));
        }
        if prob.iter().any(Signed::is_negative) {
            return invalid("negative mass");
        }
        let total: BigRational = prob.iter().sum();
        if !total.is_one() {
            return invalid(format!("total mass {total} differs from 1"));
        }
        Ok(Self { prefixes, vocab_size, prob })
    }

    /// Normalizes non-negative integer weights.
    pub fn from_weights(prefixes: usize, vocab_size: usize, weights: &[u64]) -> Result<Self> {
        let total: u128 = weights.iter().map(|&w| w as u128).sum();
        if total == 0 {
            return invalid("all weights are zero");
        }
        let total = BigRational::from_integer(total.into());
        Self::new(prefixes, vocab_size, weights.iter().map(|&w| BigRational::from_integer(w.into()) / &total).collect())
    }

    pub fn table(&self) -> &[BigRational] {
        &self.prob
    }

    pub fn total_mass(&self) -> BigRational {
        self.prob.iter().sum()
    }

    pub fn to_float(&self) -> DiscreteJoint {
        let prob = self.prob.iter().map(|p| p.to_f64().unwrap_or(f64::NAN)).collect();
        DiscreteJoint { prefixes: self.prefixes, vocab_size: self.vocab_size, prob }
    }
}

/// Conditional model `h(w | x)`. Rows may be absent for prefixes the model never sees.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTable {
    vocab_size: usize,
    rows: Vec<Option<Vec<f64>>>,
}

impl ModelTable {
    /// Every row must be strictly positive and sum to 1 within [`MASS_TOLERANCE`].
    pub fn new(vocab_size: usize, rows: Vec<Option<Vec<f64>>>) -> Result<Self> {
        for (x, row) in rows.iter().enumerate() {
            let Some(row) = row else { continue };
            if row.len() != vocab_size {
                return invalid(format!("row {x} has {} entries, expected {vocab_size}", row.len()));
            }
            if row.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
                return invalid(format!("row {x} is not strictly positive"));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > MASS_TOLERANCE {
                return invalid(format!("row {x} sums to {total}"));
            }
        }
        Ok(Self { vocab_size, rows })
    }

    pub fn uniform(prefixes: usize, vocab_size: usize) -> Self {
        let row = vec![1.0 / vocab_size as f64; vocab_size];
        Self { vocab_size, rows: vec![Some(row); prefixes] }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, x: usize) -> Option<&[f64]> {
        self.rows.get(x)?.as_deref()
    }
}

fn check_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return invalid(format!("shape mismatch: {}x{} vs {}x{}", a.0, a.1, b.0, b.1));
    }
    Ok(())
}

fn overlap_error(cell: usize, v: usize) -> Error {
    Error::AssumptionViolated(format!("clean and noise supports share cell ({}, {})", cell / v, cell % v))
}

/// `α·Pn + (1−α)·Pc`. Fails unless the supports are disjoint.
pub fn mix_joint(pc: &DiscreteJoint, pn: &DiscreteJoint, alpha: f64) -> Result<DiscreteJoint> {
    check_same_shape((pc.prefixes, pc.vocab_size), (pn.prefixes, pn.vocab_size))?;
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("alpha {alpha} outside [0, 1]"));
    }
    if let Some(cell) = (0..pc.prob.len()).find(|&i| pc.prob[i] > 0.0 && pn.prob[i] > 0.0) {
        return Err(overlap_error(cell, pc.vocab_size));
    }
    let prob = pc.prob.iter().zip(&pn.prob).map(|(&c, &n)| alpha * n + (1.0 - alpha) * c).collect();
    Ok(DiscreteJoint { prefixes: pc.prefixes, vocab_size: pc.vocab_size, prob })
}

/// Exact version of [`mix_joint`]; the result sums to exactly one.
pub fn mix_joint_exact(pc: &ExactJoint, pn: &ExactJoint, alpha: &BigRational) -> Result<ExactJoint> {
    check_same_shape((pc.prefixes, pc.vocab_size), (pn.prefixes, pn.vocab_size))?;
    if alpha.is_negative() || alpha > &BigRational::one() {
        return invalid(format!("alpha {alpha} outside [0, 1]"));
    }
    if let Some(cell) = (0..pc.prob.len()).find(|&i| !pc.prob[i].is_zero() && !pn.prob[i].is_zero()) {
        return Err(overlap_error(cell, pc.vocab_size));
    }
    let rest = BigRational::one() - alpha;
    let prob = pc.prob.iter().zip(&pn.prob).map(|(c, n)| alpha * n + &rest * c).collect();
    Ok(ExactJoint { prefixes: pc.prefixes, vocab_size: pc.vocab_size, prob })
}

/// `Σ_x P_X(x) Σ_w P(w|x)·(−ln h(w|x))`.
pub fn exact_ntp_loss(p: &DiscreteJoint, h: &ModelTable) -> Result<f64> {
    if h.vocab_size != p.vocab_size {
        return invalid(format!("model vocabulary {} differs from {}", h.vocab_size, p.vocab_size));
    }
    let mut loss = 0.0;
    for x in 0..p.prefixes {
        let px = p.marginal(x);
        let Some(cond) = p.conditional(x) else { continue };
        let row = h.row(x).ok_or_else(|| Error::InvalidArgument(format!("model has no row for prefix {x}")))?;
        let inner: f64 = cond.iter().zip(row).filter(|(c, _)| **c > 0.0).map(|(c, hw)| -c * hw.ln()).sum();
        loss += px * inner;
    }
    Ok(loss)
}

/// Losses entering the additivity identity for one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1Check {
    pub mixed: f64,
    pub noise: f64,
    pub clean: f64,
    /// `|mixed − α·noise − (1−α)·clean|`
    pub residual: f64,
}

pub fn lemma1_check(pc: &DiscreteJoint, pn: &DiscreteJoint, alpha: f64, h: &ModelTable) -> Result<Lemma1Check> {
    let pm = mix_joint(pc, pn, alpha)?;
    let mixed = exact_ntp_loss(&pm, h)?;
    let noise = exact_ntp_loss(pn, h)?;
    let clean = exact_ntp_loss(pc, h)?;
    Ok(Lemma1Check { mixed, noise, clean, residual: (mixed - alpha * noise - (1.0 - alpha) * clean).abs() })
}

/// Default smoothing floor of [`optimal_model`].
pub const OPTIMAL_FLOOR: f64 = 1e-12;

/// Row-normalized `max(P(w|x), floor)` for every prefix with positive marginal.
pub fn optimal_model(p: &DiscreteJoint, floor: f64) -> ModelTable {
    let rows = (0..p.prefixes)
        .map(|x| {
            p.conditional(x).map(|cond| {
                let raised: Vec<f64> = cond.iter().map(|&c| c.max(floor)).collect();
                let total: f64 = raised.iter().sum();
                raised.iter().map(|r| r / total).collect()
            })
        })
        .collect();
    ModelTable { vocab_size: p.vocab_size, rows }
}
