//! Linear and two-layer ReLU heads over a flat parameter vector, with exact
//! per-batch gradients and Hessian-vector products of the softmax CE.
//!
//! Parameter order: linear `W (C×d), b (C)`; mlp `W1 (d×d), b1 (d), W2 (C×d), b2 (C)`.
//! Matrices are row-major `out × in`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Mlp,
}

impl std::str::FromStr for HeadKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "mlp" => Ok(HeadKind::Mlp),
            other => invalid(format!("unknown head kind {other:?}")),
        }
    }
}

impl HeadKind {
    pub fn param_count(self, d: usize, c: usize) -> usize {
        match self {
            HeadKind::Linear => c * d + c,
            HeadKind::Mlp => d * d + d + c * d + c,
        }
    }
}

/// Features and labels of one mini-batch, features row-major `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    pub d: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ProbeBatch {
    pub fn new(d: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if d == 0 || labels.is_empty() || features.len() != d * labels.len() {
            return invalid(format!("{} feature values do not form {} rows of {d}", features.len(), labels.len()));
        }
        Ok(Self { d, features, labels })
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
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub kind: HeadKind,
    pub d: usize,
    pub classes: usize,
    pub theta: Vec<f64>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `out += m · x` for row-major `m` of shape `rows × x.len()`.
fn matvec(out: &mut [f64], m: &[f64], x: &[f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks_exact(x.len())) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += mᵀ · y` for row-major `m` of shape `y.len() × out.len()`.
fn matvec_t(out: &mut [f64], m: &[f64], y: &[f64]) {
    for (row, &yi) in m.chunks_exact(out.len()).zip(y) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yi;
        }
    }
}

/// `g += s · u xᵀ` into a row-major `u.len() × x.len()` block.
fn outer_add(g: &mut [f64], u: &[f64], x: &[f64], s: f64) {
    for (row, &ui) in g.chunks_exact_mut(x.len()).zip(u) {
        let k = s * ui;
        for (gv, xv) in row.iter_mut().zip(x) {
            *gv += k * xv;
        }
    }
}

/// `(diag p − p pᵀ) · z`
fn softmax_jvp(p: &[f64], z: &[f64]) -> Vec<f64> {
    let pz: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
    p.iter().zip(z).map(|(pi, zi)| pi * (zi - pz)).collect()
}

struct Offsets {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
}

impl ProbeHead {
    pub fn zeros(kind: HeadKind, d: usize, classes: usize) -> Self {
        Self { kind, d, classes, theta: vec![0.0; kind.param_count(d, classes)] }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(kind: HeadKind, d: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut head = Self::zeros(kind, d, classes);
        let bound = 1.0 / (d as f64).sqrt();
        let o = head.offsets();
        let ranges = match kind {
            HeadKind::Linear => vec![o.w2],
            HeadKind::Mlp => vec![o.w1, o.w2],
        };
        for r in ranges {
            head.theta[r].iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
        head
    }

    pub fn from_theta(kind: HeadKind, d: usize, classes: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != kind.param_count(d, classes) {
            return invalid(format!("{kind:?} head with d={d}, C={classes} needs {} parameters, got {}", kind.param_count(d, classes), theta.len()));
        }
        Ok(Self { kind, d, classes, theta })
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// For a linear head only `w2`/`b2` are meaningful and name `W`/`b`.
    fn offsets(&self) -> Offsets {
        let (d, c) = (self.d, self.classes);
        match self.kind {
            HeadKind::Linear => Offsets { w1: 0..0, b1: 0..0, w2: 0..c * d, b2: c * d..c * d + c },
            HeadKind::Mlp => {
                let a = d * d;
                let b = a + d;
                let e = b + c * d;
                Offsets { w1: 0..a, b1: a..b, w2: b..e, b2: e..e + c }
            }
        }
    }

    fn check(&self, batch: &ProbeBatch) -> Result<()> {
        if batch.d != self.d {
            return invalid(format!("feature dimension {} does not match head dimension {}", batch.d, self.d));
        }
        if let Some(bad) = batch.labels.iter().find(|&&y| y >= self.classes) {
            return invalid(format!("label {bad} outside {} classes", self.classes));
        }
        Ok(())
    }

    /// Hidden pre-activation (mlp only) and logits.
    fn forward(&self, t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let th = &self.theta;
        let o = self.offsets();
        match self.kind {
            HeadKind::Linear => {
                let mut z = th[o.b2].to_vec();
                matvec(&mut z, &th[o.w2], t);
                (Vec::new(), z)
            }
            HeadKind::Mlp => {
                let mut a = th[o.b1].to_vec();
                matvec(&mut a, &th[o.w1], t);
                let h: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
                let mut z = th[o.b2].to_vec();
                matvec(&mut z, &th[o.w2], &h);
                (a, z)
            }
        }
    }

    pub fn logits(&self, t: &[f64]) -> Vec<f64> {
        self.forward(t).1
    }

    pub fn predict(&self, t: &[f64]) -> usize {
        let z = self.logits(t);
        (0..z.len()).fold(0, |best, i| if z[i] > z[best] { i } else { best })
    }

    pub fn sample_loss(&self, t: &[f64], y: usize) -> f64 {
        let z = self.logits(t);
        log_sum_exp(&z) - z[y]
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn ce_loss(&self, batch: &ProbeBatch) -> Result<f64> {
        self.check(batch)?;
        let total: f64 = (0..batch.len()).map(|i| self.sample_loss(batch.row(i), batch.labels[i])).sum();
        Ok(total / batch.len() as f64)
    }

    pub fn accuracy(&self, batch: &ProbeBatch) -> Result<f64> {
        self.check(batch)?;
        let hits = (0..batch.len()).filter(|&i| self.predict(batch.row(i)) == batch.labels[i]).count();
        Ok(hits as f64 / batch.len() as f64)
    }

    /// Adds `scale · ∇θ ℓ(t, y)` to `g`.
    fn add_sample_grad(&self, t: &[f64], y: usize, scale: f64, g: &mut [f64]) {
        let o = self.offsets();
        let (a, z) = self.forward(t);
        let mut dz = softmax(&z);
        dz[y] -= 1.0;
        match self.kind {
            HeadKind::Linear => {
                outer_add(&mut g[o.w2], &dz, t, scale);
                g[o.b2].iter_mut().zip(&dz).for_each(|(gv, d)| *gv += scale * d);
            }
            HeadKind::Mlp => {
                let h: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
                outer_add(&mut g[o.w2.clone()], &dz, &h, scale);
                g[o.b2].iter_mut().zip(&dz).for_each(|(gv, d)| *gv += scale * d);
                let mut dh = vec![0.0; self.d];
                matvec_t(&mut dh, &self.theta[o.w2], &dz);
                let da: Vec<f64> = dh.iter().zip(&a).map(|(d, &av)| if av > 0.0 { *d } else { 0.0 }).collect();
                outer_add(&mut g[o.w1], &da, t, scale);
                g[o.b1].iter_mut().zip(&da).for_each(|(gv, d)| *gv += scale * d);
            }
        }
    }

    /// Adds `scale · ∇²θ ℓ(t, y) · v` to `out` (forward-over-reverse; ReLU
    /// curvature is zero almost everywhere).
    fn add_sample_hvp(&self, t: &[f64], y: usize, v: &[f64], scale: f64, out: &mut [f64]) {
        let o = self.offsets();
        let (a, z) = self.forward(t);
        let p = softmax(&z);
        match self.kind {
            HeadKind::Linear => {
                let mut zdot = v[o.b2.clone()].to_vec();
                matvec(&mut zdot, &v[o.w2.clone()], t);
                let pdot = softmax_jvp(&p, &zdot);
                outer_add(&mut out[o.w2], &pdot, t, scale);
                out[o.b2].iter_mut().zip(&pdot).for_each(|(r, d)| *r += scale * d);
            }
            HeadKind::Mlp => {
                let th = &self.theta;
                let mask: Vec<f64> = a.iter().map(|&av| if av > 0.0 { 1.0 } else { 0.0 }).collect();
                let h: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
                let mut dz = p.clone();
                dz[y] -= 1.0;

                let mut adot = v[o.b1.clone()].to_vec();
                matvec(&mut adot, &v[o.w1.clone()], t);
                let hdot: Vec<f64> = adot.iter().zip(&mask).map(|(x, m)| x * m).collect();
                let mut zdot = v[o.b2.clone()].to_vec();
                matvec(&mut zdot, &v[o.w2.clone()], &h);
                matvec(&mut zdot, &th[o.w2.clone()], &hdot);
                let pdot = softmax_jvp(&p, &zdot);

                // tangent of dW2 = dz hᵀ
                outer_add(&mut out[o.w2.clone()], &pdot, &h, scale);
                outer_add(&mut out[o.w2.clone()], &dz, &hdot, scale);
                out[o.b2].iter_mut().zip(&pdot).for_each(|(r, d)| *r += scale * d);
                // tangent of dh = W2ᵀ dz
                let mut dh_dot = vec![0.0; self.d];
                matvec_t(&mut dh_dot, &v[o.w2.clone()], &dz);
                matvec_t(&mut dh_dot, &th[o.w2], &pdot);
                let da_dot: Vec<f64> = dh_dot.iter().zip(&mask).map(|(x, m)| x * m).collect();
                outer_add(&mut out[o.w1], &da_dot, t, scale);
                out[o.b1].iter_mut().zip(&da_dot).for_each(|(r, d)| *r += scale * d);
            }
        }
    }

    /// Exact mean gradient of [`ce_loss`](Self::ce_loss) over the batch.
    pub fn batch_param_grad(&self, batch: &ProbeBatch) -> Result<Vec<f64>> {
        self.check(batch)?;
        let mut g = vec![0.0; self.num_params()];
        let s = 1.0 / batch.len() as f64;
        for i in 0..batch.len() {
            self.add_sample_grad(batch.row(i), batch.labels[i], s, &mut g);
        }
        Ok(g)
    }

    /// Hessian of the mean batch CE applied to `v`.
    pub fn batch_hvp(&self, batch: &ProbeBatch, v: &[f64]) -> Result<Vec<f64>> {
        self.check(batch)?;
        if v.len() != self.num_params() {
            return invalid(format!("direction has {} entries, head has {}", v.len(), self.num_params()));
        }
        let mut out = vec![0.0; self.num_params()];
        let s = 1.0 / batch.len() as f64;
        for i in 0..batch.len() {
            self.add_sample_hvp(batch.row(i), batch.labels[i], v, s, &mut out);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy(kind: HeadKind) -> (ProbeHead, ProbeBatch) {
        let mut r = rng::seeded(5);
        let head = ProbeHead::init(kind, 8, 3, &mut r);
        let head = ProbeHead { theta: head.theta.iter().map(|v| v + r.random_range(-0.3..0.3)).collect(), ..head };
        let feats: Vec<f64> = (0..4 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        (head, ProbeBatch::new(8, feats, vec![0, 2, 1, 2]).unwrap())
    }

    fn fd_grad(head: &ProbeHead, batch: &ProbeBatch) -> Vec<f64> {
        let h = 1e-6;
        (0..head.num_params())
            .map(|i| {
                let mut a = head.clone();
                let mut b = head.clone();
                a.theta[i] += h;
                b.theta[i] -= h;
                (a.ce_loss(batch).unwrap() - b.ce_loss(batch).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        num / den
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(HeadKind::Linear.param_count(8, 3), 27);
        assert_eq!(HeadKind::Mlp.param_count(8, 3), 64 + 8 + 24 + 3);
    }

    #[test]
    fn zero_head_loss_is_ln_c() {
        let head = ProbeHead::zeros(HeadKind::Linear, 5, 4);
        let batch = ProbeBatch::new(5, vec![0.3; 10], vec![1, 3]).unwrap();
        assert!((head.ce_loss(&batch).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_set_linear_head() {
        // W = [[1, 0], [0, 2]], b = [0, 1], t = (1, 0.5): z = (1, 2)
        let head = ProbeHead::from_theta(HeadKind::Linear, 2, 2, vec![1.0, 0.0, 0.0, 2.0, 0.0, 1.0]).unwrap();
        let batch = ProbeBatch::new(2, vec![1.0, 0.5], vec![0]).unwrap();
        let expected = (1f64.exp() + 2f64.exp()).ln() - 1.0;
        assert!((head.ce_loss(&batch).unwrap() - expected).abs() < 1e-15);
        // closed form: row c of ∇W = (softmax_c − 1{y=c})·t
        let p0 = 1.0 / (1.0 + 1f64.exp());
        let g = head.batch_param_grad(&batch).unwrap();
        assert!((g[0] - (p0 - 1.0)).abs() < 1e-15 && (g[1] - (p0 - 1.0) * 0.5).abs() < 1e-15);
        assert!((g[2] - (1.0 - p0)).abs() < 1e-15 && (g[5] - (1.0 - p0)).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [HeadKind::Linear, HeadKind::Mlp] {
            let (head, batch) = toy(kind);
            let err = rel_err(&head.batch_param_grad(&batch).unwrap(), &fd_grad(&head, &batch));
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        for kind in [HeadKind::Linear, HeadKind::Mlp] {
            let (head, batch) = toy(kind);
            let mut r = rng::seeded(1);
            let v: Vec<f64> = (0..head.num_params()).map(|_| r.random_range(-1.0..1.0)).collect();
            let h = 1e-5;
            let shifted = |s: f64| ProbeHead { theta: head.theta.iter().zip(&v).map(|(a, b)| a + s * b).collect(), ..head.clone() };
            let gp = shifted(h).batch_param_grad(&batch).unwrap();
            let gm = shifted(-h).batch_param_grad(&batch).unwrap();
            let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let err = rel_err(&head.batch_hvp(&batch, &v).unwrap(), &fd);
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let head = ProbeHead::zeros(HeadKind::Linear, 3, 2);
        let batch = ProbeBatch::new(2, vec![0.0; 2], vec![0]).unwrap();
        assert!(head.ce_loss(&batch).is_err());
        let batch = ProbeBatch::new(3, vec![0.0; 3], vec![2]).unwrap();
        assert!(head.ce_loss(&batch).is_err());
    }
}
