//! The loss gap `f(ε)` between the clean optimum and a perturbed model on the
//! mixture, its critical scale `η`, and randomized checks of the three cases.

use num_rational::BigRational;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Slack applied to sign checks on `f`, which is evaluated in double precision.
pub const SIGN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropositionParams {
    pub alpha: f64,
    pub p_c: f64,
    pub p_n: f64,
    pub k: f64,
    pub epsilon: f64,
}

impl PropositionParams {
    pub fn new(alpha: f64, p_c: f64, p_n: f64, k: f64) -> Self {
        Self { alpha, p_c, p_n, k, epsilon: 0.0 }
    }

    /// Clean and noise token probabilities equal and `k = 1`: two languages
    /// mixed in one corpus rather than structured text plus noise.
    pub fn multilingual(alpha: f64, p: f64) -> Self {
        Self::new(alpha, p, p, 1.0)
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }

    pub fn eta(&self) -> f64 {
        eta(self.alpha, self.p_c, self.p_n, self.k)
    }

    /// `k·p_n / (p_c + k·p_n)`: at or below this noise share the clean optimum survives.
    pub fn threshold(&self) -> f64 {
        let q = self.k * self.p_n;
        q / (self.p_c + q)
    }

    fn check_ranges(&self) -> std::result::Result<(), String> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !unit(self.p_c) || !unit(self.p_n) {
            return Err(format!("p_c {} or p_n {} outside (0, 1]", self.p_c, self.p_n));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(format!("k {} not positive", self.k));
        }
        Ok(())
    }
}

/// `α·p_c − (1−α)·k·p_n`
pub fn eta(alpha: f64, p_c: f64, p_n: f64, k: f64) -> f64 {
    alpha * p_c - (1.0 - alpha) * k * p_n
}

pub fn eta_exact(alpha: &BigRational, p_c: &BigRational, p_n: &BigRational, k: &BigRational) -> BigRational {
    alpha * p_c - (BigRational::from_integer(1.into()) - alpha) * k * p_n
}

/// `f(ε) = (1−α)·ln((p_c−ε)/p_c) + α·ln((p_n+ε/k)/p_n)`, defined for
/// `−k·p_n < ε < p_c`.
pub fn f_epsilon(pp: &PropositionParams) -> Result<f64> {
    let PropositionParams { alpha, p_c, p_n, k, epsilon } = *pp;
    if !(epsilon < p_c) || !(epsilon > -k * p_n) {
        return Err(Error::Domain(format!("epsilon {epsilon} outside (-k*p_n, p_c) = ({}, {p_c})", -k * p_n)));
    }
    Ok((1.0 - alpha) * (-epsilon / p_c).ln_1p() + alpha * (epsilon / (k * p_n)).ln_1p())
}

/// Analytic `f′(ε) = −(1−α)/(p_c−ε) + α/(k·p_n+ε)`.
pub fn f_prime(pp: &PropositionParams) -> f64 {
    let PropositionParams { alpha, p_c, p_n, k, epsilon } = *pp;
    -(1.0 - alpha) / (p_c - epsilon) + alpha / (k * p_n + epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prop1Case {
    /// `α ≤ threshold` ⇒ `f ≤ 0` on `(0, p_c)`.
    One,
    /// `α > threshold` ⇒ `f > 0` on `(0, η)`.
    Two,
    /// `f(3η) < 0` for small `α`, `f(2η) < 0` for large `α`, given a large enough `k`.
    Three,
}

impl Prop1Case {
    pub fn number(self) -> u8 {
        match self {
            Prop1Case::One => 1,
            Prop1Case::Two => 2,
            Prop1Case::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Prop1Case::One),
            2 => Ok(Prop1Case::Two),
            3 => Ok(Prop1Case::Three),
            _ => Err(Error::InvalidArgument(format!("no case {n}"))),
        }
    }
}

/// `k` above which `f(3η) < 0` is claimed when `α < 1/3`.
pub fn case3_small_alpha_k_bound(alpha: f64, p_c: f64, p_n: f64) -> f64 {
    alpha * (1.0 - 3.0 * alpha) * p_c / ((1.0 - alpha) * (2.0 - 3.0 * alpha) * p_n)
}

/// `k` above which `f(2η) < 0` is claimed when `α > 1/2`.
pub fn case3_large_alpha_k_bound(alpha: f64, p_c: f64, p_n: f64) -> f64 {
    (2.0 * alpha - 1.0) * p_c / (2.0 * (1.0 - alpha) * p_n)
}

/// Which multiple of `η` case 3 evaluates for these parameters.
///
/// Both branches also require `η > 0`: otherwise `mη` is not a degradation
/// and for the small-`α` branch typically lies outside the domain of `f`.
pub fn case3_multiple(pp: &PropositionParams) -> std::result::Result<f64, String> {
    pp.check_ranges()?;
    let (a, t) = (pp.alpha, pp.threshold());
    if a <= t {
        return Err(format!("alpha {a} <= threshold {t}, so eta <= 0"));
    }
    if a < 1.0 / 3.0 {
        let bound = case3_small_alpha_k_bound(a, pp.p_c, pp.p_n);
        return if pp.k > bound { Ok(3.0) } else { Err(format!("k {} <= bound {bound}", pp.k)) };
    }
    if a > 0.5 {
        let bound = case3_large_alpha_k_bound(a, pp.p_c, pp.p_n);
        return if pp.k > bound { Ok(2.0) } else { Err(format!("k {} <= bound {bound}", pp.k)) };
    }
    Err(format!("alpha {a} in [1/3, 1/2] is not covered"))
}

/// Checks that the hypotheses of `case` hold, returning the reason if not.
pub fn hypotheses(case: Prop1Case, pp: &PropositionParams) -> std::result::Result<(), String> {
    pp.check_ranges()?;
    let (a, t) = (pp.alpha, pp.threshold());
    match case {
        Prop1Case::One if a <= t => Ok(()),
        Prop1Case::One => Err(format!("alpha {a} > threshold {t}")),
        Prop1Case::Two if a > t => Ok(()),
        Prop1Case::Two => Err(format!("alpha {a} <= threshold {t}")),
        Prop1Case::Three => case3_multiple(pp).map(|_| ()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub params: PropositionParams,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub params: PropositionParams,
    pub reason: String,
}

/// Outcome of [`verify_prop1`] for one case.
///
/// `max_residual` is the largest value, over every evaluation, of the
/// quantity the case claims is non-positive (`f` in cases 1 and 3, `−f` in
/// case 2); a negative value means every check held with margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub case: u8,
    pub draws: usize,
    pub grid: usize,
    pub evaluations: usize,
    pub counterexamples: Vec<Counterexample>,
    pub skipped: Vec<Skipped>,
    pub max_residual: f64,
}

impl Prop1Report {
    pub fn passed(&self) -> bool {
        self.counterexamples.is_empty() && self.skipped.is_empty()
    }
}

/// Checks one parameter set against its case, appending any counterexamples.
pub fn check_case(case: Prop1Case, pp: &PropositionParams, grid: usize, report: &mut Prop1Report) {
    if let Err(reason) = hypotheses(case, pp) {
        report.skipped.push(Skipped { params: *pp, reason });
        return;
    }
    let mut visit = |eps: f64, sign: f64| match f_epsilon(&pp.with_epsilon(eps)) {
        Ok(f) => {
            report.evaluations += 1;
            let r = sign * f;
            report.max_residual = report.max_residual.max(r);
            let violated = if sign > 0.0 { r > SIGN_TOLERANCE } else { r >= 0.0 };
            if violated {
                report.counterexamples.push(Counterexample { params: pp.with_epsilon(eps), f });
            }
        }
        Err(e) => report.skipped.push(Skipped { params: pp.with_epsilon(eps), reason: e.to_string() }),
    };
    match case {
        Prop1Case::One => (1..=grid).for_each(|i| visit(pp.p_c * i as f64 / (grid + 1) as f64, 1.0)),
        Prop1Case::Two => {
            let eta = pp.eta();
            (1..=grid).for_each(|i| visit(eta * i as f64 / (grid + 1) as f64, -1.0))
        }
        Prop1Case::Three => {
            let m = case3_multiple(pp).expect("checked above");
            visit(m * pp.eta(), 1.0)
        }
    }
}

fn log_uniform(rng: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn open_unit(rng: &mut rng::Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Draws parameters meant to satisfy `case`; the hypotheses are checked again
/// before use. For case 1 every twentieth draw sits exactly on the threshold.
pub fn draw_params(case: Prop1Case, index: usize, rng: &mut rng::Rng) -> PropositionParams {
    let p_c = open_unit(rng);
    let p_n = log_uniform(rng, 1e-6, 1.0);
    match case {
        Prop1Case::One | Prop1Case::Two => {
            let k = log_uniform(rng, 1e-2, 1e4);
            let pp = PropositionParams::new(0.5, p_c, p_n, k);
            let t = pp.threshold();
            let alpha = match case {
                Prop1Case::One if index.is_multiple_of(20) => t,
                Prop1Case::One => t * open_unit(rng),
                _ => t + (1.0 - t) * open_unit(rng),
            };
            PropositionParams { alpha: alpha.min(1.0 - 1e-12), ..pp }
        }
        Prop1Case::Three => {
            // pick k·p_n strictly between the k-bound and the η > 0 limit
            let (alpha, lo) = if index.is_multiple_of(2) {
                let a = open_unit(rng) / 3.0;
                (a, case3_small_alpha_k_bound(a, p_c, 1.0))
            } else {
                let a = 0.5 + 0.5 * open_unit(rng);
                (a, case3_large_alpha_k_bound(a, p_c, 1.0))
            };
            let hi = alpha * p_c / (1.0 - alpha);
            let q = lo + (hi - lo) * open_unit(rng);
            PropositionParams::new(alpha, p_c, p_n, q / p_n)
        }
    }
}

/// Checks `draws` random parameter sets for `case` on `grid`-point ε grids.
pub fn verify_prop1(case: Prop1Case, draws: usize, grid: usize, seed: u64) -> Prop1Report {
    let mut rng = rng::stream(seed, case.number() as u64);
    let mut report = Prop1Report {
        case: case.number(),
        draws,
        grid,
        evaluations: 0,
        counterexamples: Vec::new(),
        skipped: Vec::new(),
        max_residual: f64::NEG_INFINITY,
    };
    for i in 0..draws {
        let pp = draw_params(case, i, &mut rng);
        check_case(case, &pp, grid, &mut report);
    }
    report
}

/// `ε` and `k` recovered from the clean and noise losses of the clean-trained
/// model `h*` and a noise-trained model `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    pub epsilon: f64,
    pub eps_over_k: f64,
    pub k: f64,
    /// `ε·exp(L(Pn, h))`, a lower bound on `k` since `ε/k ≤ exp(−L(Pn, h))`.
    pub exp_lower_bound: f64,
}

pub fn k_from_losses(lc_hstar: f64, lc_h: f64, ln_hstar: f64, ln_h: f64) -> Result<KEstimate> {
    let epsilon = (-lc_hstar).exp() - (-lc_h).exp();
    let eps_over_k = (-ln_h).exp() - (-ln_hstar).exp();
    if !(epsilon > 0.0) {
        return Err(Error::IllPosed(format!("epsilon = {epsilon} is not positive: the noisy model is no worse on clean data")));
    }
    if !(eps_over_k > 0.0) {
        return Err(Error::IllPosed(format!("epsilon/k = {eps_over_k} is not positive: the noisy model fits noise no better")));
    }
    Ok(KEstimate { epsilon, eps_over_k, k: epsilon / eps_over_k, exp_lower_bound: epsilon * ln_h.exp() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta_values() {
        // 0.5·0.5 − 0.5·20·0.01
        assert!((eta(0.5, 0.5, 0.01, 20.0) - 0.15).abs() < 1e-15);
        assert_eq!(eta(0.0, 0.5, 0.01, 20.0), -0.2);
        let pp = PropositionParams::new(0.5, 0.5, 0.01, 20.0);
        let at = PropositionParams { alpha: pp.threshold(), ..pp };
        assert!(at.eta().abs() < 1e-15);
    }

    #[test]
    fn eta_exact_on_rationals() {
        let r = |n: i64, d: i64| BigRational::new(n.into(), d.into());
        assert_eq!(eta_exact(&r(1, 2), &r(1, 2), &r(1, 100), &r(20, 1)), r(3, 20));
    }

    #[test]
    fn f_vanishes_at_zero_and_is_stationary_at_eta() {
        let pp = PropositionParams::new(0.5, 0.5, 0.01, 20.0);
        assert_eq!(f_epsilon(&pp).unwrap(), 0.0);
        let eta = pp.eta();
        assert!(f_prime(&pp.with_epsilon(eta)).abs() < 1e-12);
        let h = 1e-6;
        let d = |e: f64| (f_epsilon(&pp.with_epsilon(e + h)).unwrap() - f_epsilon(&pp.with_epsilon(e - h)).unwrap()) / (2.0 * h);
        assert!(d(eta - 1e-3) > 0.0 && d(eta + 1e-3) < 0.0);
    }

    #[test]
    fn domain_error_at_p_c() {
        let pp = PropositionParams::new(0.5, 0.5, 0.01, 20.0).with_epsilon(0.5);
        assert!(matches!(f_epsilon(&pp), Err(Error::Domain(_))));
    }

    #[test]
    fn case_one_grid_example() {
        let pp = PropositionParams::new(0.2, 0.5, 0.1, 10.0);
        assert!((pp.threshold() - 2.0 / 3.0).abs() < 1e-15);
        let mut report = verify_prop1(Prop1Case::One, 0, 0, 0);
        check_case(Prop1Case::One, &pp, 10_000, &mut report);
        assert_eq!(report.evaluations, 10_000);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn case_one_boundary_is_included() {
        let base = PropositionParams::new(0.5, 0.5, 0.1, 10.0);
        let pp = PropositionParams { alpha: base.threshold(), ..base };
        let mut report = verify_prop1(Prop1Case::One, 0, 0, 0);
        check_case(Prop1Case::One, &pp, 10_000, &mut report);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn case_three_examples() {
        let pp = PropositionParams::new(0.25, 0.5, 0.002, 30.0);
        assert_eq!(case3_multiple(&pp), Ok(3.0));
        assert!(f_epsilon(&pp.with_epsilon(3.0 * pp.eta())).unwrap() < 0.0);
        let pp = PropositionParams::new(0.6, 0.5, 0.01, 30.0);
        assert_eq!(case3_multiple(&pp), Ok(2.0));
        assert!(f_epsilon(&pp.with_epsilon(2.0 * pp.eta())).unwrap() < 0.0);
    }

    #[test]
    fn case_three_needs_positive_eta() {
        // k-bound ≈ 1.667 holds, but η = 0.125 − 0.45 < 0
        let pp = PropositionParams::new(0.25, 0.5, 0.02, 30.0);
        assert!((case3_small_alpha_k_bound(0.25, 0.5, 0.02) - 0.0625 * 0.5 / (0.75 * 1.25 * 0.02)).abs() < 1e-12);
        assert!(pp.eta() < 0.0);
        assert!(case3_multiple(&pp).is_err());
        assert!(f_epsilon(&pp.with_epsilon(3.0 * pp.eta())).is_err());
    }

    #[test]
    fn k_from_hand_losses() {
        let est = k_from_losses(-(0.5f64.ln()), -(0.4f64.ln()), -(0.01f64.ln()), -(0.015f64.ln())).unwrap();
        assert!((est.epsilon - 0.1).abs() < 1e-12);
        assert!((est.eps_over_k - 0.005).abs() < 1e-12);
        assert!((est.k - 20.0).abs() < 1e-9);
        assert!(est.k >= est.exp_lower_bound);
        assert!(matches!(k_from_losses(1.0, 1.0, 2.0, 1.5), Err(Error::IllPosed(_))));
        assert!(matches!(k_from_losses(1.0, 1.1, 2.0, 2.5), Err(Error::IllPosed(_))));
    }
}
