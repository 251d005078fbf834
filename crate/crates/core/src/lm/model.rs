//! Decoder-only transformer with a hand-written backward pass.
//!
//! Pre-norm GPT-2 blocks: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`, final
//! layer norm, and an output projection tied to the token embedding. All
//! parameters live in one flat buffer; [`ParamLayout`] names the slices.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::config::LmConfig;
use super::scalar::Scalar;
use crate::error::{invalid, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    fn range(self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpans {
    pub ln1_w: Span,
    pub ln1_b: Span,
    pub qkv_w: Span,
    pub qkv_b: Span,
    pub proj_w: Span,
    pub proj_b: Span,
    pub ln2_w: Span,
    pub ln2_b: Span,
    pub fc_w: Span,
    pub fc_b: Span,
    pub fcproj_w: Span,
    pub fcproj_b: Span,
}

/// Offsets of every named tensor inside the flat parameter buffer.
///
/// Order: `wte (V×C)`, `wpe (L×C)`, then per layer `ln1_w, ln1_b, qkv_w (3C×C),
/// qkv_b, proj_w (C×C), proj_b, ln2_w, ln2_b, fc_w (4C×C), fc_b, fcproj_w (C×4C),
/// fcproj_b`, then `lnf_w, lnf_b`. Weight matrices are row-major `out × in`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub wte: Span,
    pub wpe: Span,
    pub layers: Vec<LayerSpans>,
    pub lnf_w: Span,
    pub lnf_b: Span,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &LmConfig) -> Self {
        let c = cfg.d_model;
        let mut cursor = 0;
        let mut take = |len: usize| {
            let s = Span { offset: cursor, len };
            cursor += len;
            s
        };
        let wte = take(cfg.vocab_size * c);
        let wpe = take(cfg.context_len * c);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSpans {
                ln1_w: take(c),
                ln1_b: take(c),
                qkv_w: take(3 * c * c),
                qkv_b: take(3 * c),
                proj_w: take(c * c),
                proj_b: take(c),
                ln2_w: take(c),
                ln2_b: take(c),
                fc_w: take(4 * c * c),
                fc_b: take(4 * c),
                fcproj_w: take(4 * c * c),
                fcproj_b: take(c),
            })
            .collect();
        let lnf_w = take(c);
        let lnf_b = take(c);
        Self { wte, wpe, layers, lnf_w, lnf_b, total: cursor }
    }

    /// Matrices that receive decoupled weight decay (biases and norms do not).
    pub fn decayed(&self) -> Vec<Span> {
        let mut out = vec![self.wte, self.wpe];
        for l in &self.layers {
            out.extend([l.qkv_w, l.proj_w, l.fc_w, l.fcproj_w]);
        }
        out
    }
}

/// Parameters of the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T: Scalar = f32> {
    pub config: LmConfig,
    pub layout: ParamLayout,
    pub data: Vec<T>,
}

/// Logits of a forward pass, `batch × len × vocab` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T: Scalar = f32> {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn at(&self, b: usize, j: usize) -> &[T] {
        let row = (b * self.len + j) * self.vocab;
        &self.data[row..row + self.vocab]
    }
}

/// Mean next-token cross-entropy in nats over all `batch × len` positions.
pub fn ntp_loss<T: Scalar>(logits: &Logits<T>, targets: &[u32]) -> Result<f64> {
    let n = logits.batch * logits.len;
    if targets.len() != n || logits.data.len() != n * logits.vocab {
        return invalid(format!("shape mismatch: {} targets for {}x{} logits", targets.len(), logits.batch, logits.len));
    }
    let mut total = 0.0f64;
    for (row, &y) in logits.data.chunks_exact(logits.vocab).zip(targets) {
        if y as usize >= logits.vocab {
            return invalid(format!("target {y} outside vocabulary {}", logits.vocab));
        }
        total += cross_entropy_row(row, y as usize);
    }
    Ok(total / n as f64)
}

/// Mean next-token cross-entropy of each batch row.
pub fn row_losses<T: Scalar>(logits: &Logits<T>, targets: &[u32]) -> Result<Vec<f64>> {
    let n = logits.batch * logits.len;
    if targets.len() != n || logits.data.len() != n * logits.vocab {
        return invalid(format!("shape mismatch: {} targets for {}x{} logits", targets.len(), logits.batch, logits.len));
    }
    let mut out = Vec::with_capacity(logits.batch);
    for (rows, ys) in logits.data.chunks_exact(logits.len * logits.vocab).zip(targets.chunks_exact(logits.len)) {
        let mut total = 0.0;
        for (row, &y) in rows.chunks_exact(logits.vocab).zip(ys) {
            if y as usize >= logits.vocab {
                return invalid(format!("target {y} outside vocabulary {}", logits.vocab));
            }
            total += cross_entropy_row(row, y as usize);
        }
        out.push(total / logits.len as f64);
    }
    Ok(out)
}

fn cross_entropy_row<T: Scalar>(row: &[T], y: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
    if max == f64::INFINITY {
        return if row[y].as_f64() == f64::INFINITY { 0.0 } else { f64::INFINITY };
    }
    let sum: f64 = row.iter().map(|&v| (v.as_f64() - max).exp()).sum();
    max + sum.ln() - row[y].as_f64()
}

struct LayerActs<T> {
    ln1: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    atty: Vec<T>,
    drop_att: Option<Vec<T>>,
    resid_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    fch: Vec<T>,
    fch_gelu: Vec<T>,
    drop_mlp: Option<Vec<T>>,
}

/// Activation cache of one forward pass, consumed by [`LmParams::backward`].
pub struct ForwardCache<T: Scalar> {
    batch: usize,
    len: usize,
    inputs: Vec<u32>,
    /// Residual stream entering each block, plus the stream after the last block.
    resid: Vec<Vec<T>>,
    layers: Vec<LayerActs<T>>,
    lnf: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
    pub logits: Logits<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Final-layer post-norm hidden state at position `j` of row `b`.
    pub fn hidden(&self, b: usize, j: usize, d: usize) -> &[T] {
        let row = (b * self.len + j) * d;
        &self.lnf[row..row + d]
    }
}

impl<T: Scalar> LmParams<T> {
    /// GPT-2 initialization: N(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2·n_layers)`, zero biases, unit norm gains.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut data = vec![T::zero(); layout.total];
        let mut rng = rng::stream(seed, rng::streams::INIT);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |span: Span, sd: f64, rng: &mut Rng| {
            let dist = Normal::new(0.0, sd).expect("positive std");
            for v in &mut data[span.range()] {
                *v = T::lit(dist.sample(rng));
            }
        };
        fill(layout.wte, std, &mut rng);
        fill(layout.wpe, std, &mut rng);
        for l in &layout.layers {
            fill(l.qkv_w, std, &mut rng);
            fill(l.proj_w, resid_std, &mut rng);
            fill(l.fc_w, std, &mut rng);
            fill(l.fcproj_w, resid_std, &mut rng);
        }
        for span in layout.layers.iter().flat_map(|l| [l.ln1_w, l.ln2_w]).chain([layout.lnf_w]) {
            data[span.range()].fill(T::one());
        }
        Ok(Self { config, layout, data })
    }

    pub fn from_raw(config: LmConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if data.len() != layout.total {
            return invalid(format!("expected {} parameters, got {}", layout.total, data.len()));
        }
        Ok(Self { config, layout, data })
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn slice(&self, span: Span) -> &[T] {
        &self.data[span.range()]
    }

    pub fn slice_mut(&mut self, span: Span) -> &mut [T] {
        &mut self.data[span.range()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> LmParams<U> {
        LmParams {
            config: self.config,
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Logits for `inputs` (`batch × len`, row-major).
    pub fn forward_logits(&self, inputs: &[u32], batch: usize) -> Result<Logits<T>> {
        Ok(self.forward(inputs, batch, None)?.logits)
    }

    /// Forward pass keeping every activation needed by the backward pass.
    /// Dropout is applied only when `dropout_rng` is given and the config rate is positive.
    pub fn forward(&self, inputs: &[u32], batch: usize, mut dropout_rng: Option<&mut Rng>) -> Result<ForwardCache<T>> {
        let cfg = &self.config;
        if batch == 0 || inputs.is_empty() || !inputs.len().is_multiple_of(batch) {
            return invalid(format!("{} tokens do not form {batch} rows", inputs.len()));
        }
        let t = inputs.len() / batch;
        if t > cfg.context_len {
            return invalid(format!("sequence length {t} exceeds context {}", cfg.context_len));
        }
        if let Some(bad) = inputs.iter().find(|&&x| x as usize >= cfg.vocab_size) {
            return invalid(format!("token {bad} outside vocabulary {}", cfg.vocab_size));
        }
        let (c, nh, v) = (cfg.d_model, cfg.n_heads, cfg.vocab_size);
        let n = batch * t;
        let p = &self.data;

        let mut x = vec![T::zero(); n * c];
        let wte = &p[self.layout.wte.range()];
        let wpe = &p[self.layout.wpe.range()];
        for (row, &tok) in inputs.iter().enumerate() {
            let pos = row % t;
            let tok = tok as usize;
            for ch in 0..c {
                x[row * c + ch] = wte[tok * c + ch] + wpe[pos * c + ch];
            }
        }

        let rate = cfg.dropout;
        let mut resid = Vec::with_capacity(cfg.n_layers + 1);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for spans in &self.layout.layers {
            let mut ln1 = vec![T::zero(); n * c];
            let mut ln1_mean = vec![T::zero(); n];
            let mut ln1_rstd = vec![T::zero(); n];
            layernorm_forward(&mut ln1, &mut ln1_mean, &mut ln1_rstd, &x, &p[spans.ln1_w.range()], &p[spans.ln1_b.range()], c);

            let mut qkv = vec![T::zero(); n * 3 * c];
            matmul_forward(&mut qkv, &ln1, &p[spans.qkv_w.range()], &p[spans.qkv_b.range()], c, 3 * c);

            let mut att = vec![T::zero(); batch * nh * t * t];
            let mut atty = vec![T::zero(); n * c];
            attention_forward(&mut atty, &mut att, &qkv, batch, t, c, nh);

            let mut branch = vec![T::zero(); n * c];
            matmul_forward(&mut branch, &atty, &p[spans.proj_w.range()], &p[spans.proj_b.range()], c, c);
            let drop_att = apply_dropout(&mut branch, rate, dropout_rng.as_deref_mut());
            let resid_mid: Vec<T> = x.iter().zip(&branch).map(|(&a, &b)| a + b).collect();

            let mut ln2 = vec![T::zero(); n * c];
            let mut ln2_mean = vec![T::zero(); n];
            let mut ln2_rstd = vec![T::zero(); n];
            layernorm_forward(&mut ln2, &mut ln2_mean, &mut ln2_rstd, &resid_mid, &p[spans.ln2_w.range()], &p[spans.ln2_b.range()], c);

            let mut fch = vec![T::zero(); n * 4 * c];
            matmul_forward(&mut fch, &ln2, &p[spans.fc_w.range()], &p[spans.fc_b.range()], c, 4 * c);
            let fch_gelu: Vec<T> = fch.iter().map(|&u| gelu(u)).collect();
            let mut branch = vec![T::zero(); n * c];
            matmul_forward(&mut branch, &fch_gelu, &p[spans.fcproj_w.range()], &p[spans.fcproj_b.range()], 4 * c, c);
            let drop_mlp = apply_dropout(&mut branch, rate, dropout_rng.as_deref_mut());
            let next: Vec<T> = resid_mid.iter().zip(&branch).map(|(&a, &b)| a + b).collect();

            resid.push(std::mem::replace(&mut x, next));
            layers.push(LayerActs {
                ln1,
                ln1_mean,
                ln1_rstd,
                qkv,
                att,
                atty,
                drop_att,
                resid_mid,
                ln2,
                ln2_mean,
                ln2_rstd,
                fch,
                fch_gelu,
                drop_mlp,
            });
        }

        let mut lnf = vec![T::zero(); n * c];
        let mut lnf_mean = vec![T::zero(); n];
        let mut lnf_rstd = vec![T::zero(); n];
        layernorm_forward(&mut lnf, &mut lnf_mean, &mut lnf_rstd, &x, &p[self.layout.lnf_w.range()], &p[self.layout.lnf_b.range()], c);
        resid.push(x);

        let mut logits = vec![T::zero(); n * v];
        T::gemm(n, c, v, T::one(), (&lnf, c as isize, 1), (wte, 1, c as isize), T::zero(), (&mut logits, v as isize, 1));

        Ok(ForwardCache {
            batch,
            len: t,
            inputs: inputs.to_vec(),
            resid,
            layers,
            lnf,
            lnf_mean,
            lnf_rstd,
            logits: Logits { batch, len: t, vocab: v, data: logits },
        })
    }

    /// Accumulates `scale ×` the gradient of the mean NTP loss into `grads`
    /// and returns the (unscaled) mean loss.
    pub fn backward(&self, cache: &ForwardCache<T>, targets: &[u32], scale: f64, grads: &mut [T]) -> Result<f64> {
        let cfg = &self.config;
        let (c, nh, v) = (cfg.d_model, cfg.n_heads, cfg.vocab_size);
        let (batch, t) = (cache.batch, cache.len);
        let n = batch * t;
        if targets.len() != n {
            return invalid(format!("{} targets for {n} positions", targets.len()));
        }
        if grads.len() != self.layout.total {
            return invalid("gradient buffer does not match parameter count");
        }
        if let Some(bad) = targets.iter().find(|&&y| y as usize >= v) {
            return invalid(format!("target {bad} outside vocabulary {v}"));
        }
        let p = &self.data;
        let lay = &self.layout;

        // d loss / d logits = (softmax - onehot) / n
        let mut dlogits = vec![T::zero(); n * v];
        let mut loss = 0.0f64;
        let coeff = scale / n as f64;
        for (row, &y) in targets.iter().enumerate() {
            let logits = &cache.logits.data[row * v..(row + 1) * v];
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z.as_f64()));
            let mut sum = 0.0f64;
            let drow = &mut dlogits[row * v..(row + 1) * v];
            for (d, &z) in drow.iter_mut().zip(logits) {
                let e = (z.as_f64() - max).exp();
                *d = T::lit(e);
                sum += e;
            }
            loss += max + sum.ln() - logits[y as usize].as_f64();
            for (i, d) in drow.iter_mut().enumerate() {
                let prob = d.as_f64() / sum;
                let onehot = if i == y as usize { 1.0 } else { 0.0 };
                *d = T::lit((prob - onehot) * coeff);
            }
        }
        loss /= n as f64;

        let (before_wte, rest) = grads.split_at_mut(lay.wte.offset + lay.wte.len);
        let dwte = &mut before_wte[lay.wte.range()];
        let wte = &p[lay.wte.range()];

        let mut dlnf = vec![T::zero(); n * c];
        T::gemm(n, v, c, T::one(), (&dlogits, v as isize, 1), (wte, c as isize, 1), T::zero(), (&mut dlnf, c as isize, 1));
        T::gemm(v, n, c, T::one(), (&dlogits, 1, v as isize), (&cache.lnf, c as isize, 1), T::one(), (dwte, c as isize, 1));
        drop(dlogits);

        let rest_base = lay.wte.offset + lay.wte.len;
        let g = |span: Span| span.offset - rest_base..span.offset - rest_base + span.len;

        let mut dx = vec![T::zero(); n * c];
        {
            let (dw, db) = two_mut(rest, g(lay.lnf_w), g(lay.lnf_b));
            layernorm_backward(&mut dx, dw, db, &dlnf, &cache.resid[cfg.n_layers], &p[lay.lnf_w.range()], &cache.lnf_mean, &cache.lnf_rstd, c);
        }

        for (li, spans) in lay.layers.iter().enumerate().rev() {
            let acts = &cache.layers[li];
            let x_in = &cache.resid[li];

            // MLP branch: dx flows to resid_mid directly and through the branch.
            let mut dbranch = dx.clone();
            if let Some(mask) = &acts.drop_mlp {
                dbranch.iter_mut().zip(mask).for_each(|(d, &m)| *d = *d * m);
            }
            let mut dfch_gelu = vec![T::zero(); n * 4 * c];
            {
                let (dw, db) = two_mut(rest, g(spans.fcproj_w), g(spans.fcproj_b));
                matmul_backward(&mut dfch_gelu, dw, db, &dbranch, &acts.fch_gelu, &p[spans.fcproj_w.range()], 4 * c, c);
            }
            let dfch: Vec<T> = dfch_gelu.iter().zip(&acts.fch).map(|(&d, &u)| d * gelu_grad(u)).collect();
            let mut dln2 = vec![T::zero(); n * c];
            {
                let (dw, db) = two_mut(rest, g(spans.fc_w), g(spans.fc_b));
                matmul_backward(&mut dln2, dw, db, &dfch, &acts.ln2, &p[spans.fc_w.range()], c, 4 * c);
            }
            {
                let (dw, db) = two_mut(rest, g(spans.ln2_w), g(spans.ln2_b));
                layernorm_backward(&mut dx, dw, db, &dln2, &acts.resid_mid, &p[spans.ln2_w.range()], &acts.ln2_mean, &acts.ln2_rstd, c);
            }

            // Attention branch.
            let mut dbranch = dx.clone();
            if let Some(mask) = &acts.drop_att {
                dbranch.iter_mut().zip(mask).for_each(|(d, &m)| *d = *d * m);
            }
            let mut datty = vec![T::zero(); n * c];
            {
                let (dw, db) = two_mut(rest, g(spans.proj_w), g(spans.proj_b));
                matmul_backward(&mut datty, dw, db, &dbranch, &acts.atty, &p[spans.proj_w.range()], c, c);
            }
            let mut dqkv = vec![T::zero(); n * 3 * c];
            attention_backward(&mut dqkv, &datty, &acts.qkv, &acts.att, batch, t, c, nh);
            let mut dln1 = vec![T::zero(); n * c];
            {
                let (dw, db) = two_mut(rest, g(spans.qkv_w), g(spans.qkv_b));
                matmul_backward(&mut dln1, dw, db, &dqkv, &acts.ln1, &p[spans.qkv_w.range()], c, 3 * c);
            }
            {
                let (dw, db) = two_mut(rest, g(spans.ln1_w), g(spans.ln1_b));
                layernorm_backward(&mut dx, dw, db, &dln1, x_in, &p[spans.ln1_w.range()], &acts.ln1_mean, &acts.ln1_rstd, c);
            }
        }

        // Embeddings.
        let dwpe = &mut rest[g(lay.wpe)];
        for (row, &tok) in cache.inputs.iter().enumerate() {
            let pos = row % t;
            let tok = tok as usize;
            for ch in 0..c {
                let d = dx[row * c + ch];
                dwte[tok * c + ch] = dwte[tok * c + ch] + d;
                dwpe[pos * c + ch] = dwpe[pos * c + ch] + d;
            }
        }
        Ok(loss)
    }
}

/// Two disjoint mutable sub-slices of `buf`, `a` before `b`.
fn two_mut<T>(buf: &mut [T], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [T], &mut [T]) {
    debug_assert!(a.end <= b.start);
    let (head, tail) = buf.split_at_mut(b.start);
    (&mut head[a], &mut tail[..b.end - b.start])
}

fn apply_dropout<T: Scalar>(x: &mut [T], rate: f64, rng: Option<&mut Rng>) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    x.iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
    Some(mask)
}

fn layernorm_forward<T: Scalar>(out: &mut [T], mean: &mut [T], rstd: &mut [T], inp: &[T], w: &[T], b: &[T], c: usize) {
    let eps = T::lit(1e-5);
    let cn = T::lit(c as f64);
    for (row, (o, x)) in out.chunks_exact_mut(c).zip(inp.chunks_exact(c)).enumerate() {
        let m = x.iter().copied().sum::<T>() / cn;
        let var = x.iter().map(|&xi| (xi - m) * (xi - m)).sum::<T>() / cn;
        let s = (var + eps).sqrt().recip();
        for i in 0..c {
            o[i] = (x[i] - m) * s * w[i] + b[i];
        }
        mean[row] = m;
        rstd[row] = s;
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward<T: Scalar>(
    dinp: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    dout: &[T],
    inp: &[T],
    w: &[T],
    mean: &[T],
    rstd: &[T],
    c: usize,
) {
    let cn = T::lit(c as f64);
    for row in 0..mean.len() {
        let x = &inp[row * c..(row + 1) * c];
        let d = &dout[row * c..(row + 1) * c];
        let (m, s) = (mean[row], rstd[row]);
        let mut dnorm_mean = T::zero();
        let mut dnorm_norm_mean = T::zero();
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dnorm = w[i] * d[i];
            dnorm_mean = dnorm_mean + dnorm;
            dnorm_norm_mean = dnorm_norm_mean + dnorm * norm;
        }
        dnorm_mean = dnorm_mean / cn;
        dnorm_norm_mean = dnorm_norm_mean / cn;
        let di = &mut dinp[row * c..(row + 1) * c];
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dnorm = w[i] * d[i];
            db[i] = db[i] + d[i];
            dw[i] = dw[i] + norm * d[i];
            di[i] = di[i] + (dnorm - dnorm_mean - norm * dnorm_norm_mean) * s;
        }
    }
}

/// `out (n×oc) = inp (n×ic) @ w^T + bias`, `w` is `oc × ic`.
fn matmul_forward<T: Scalar>(out: &mut [T], inp: &[T], w: &[T], bias: &[T], ic: usize, oc: usize) {
    let n = inp.len() / ic;
    for row in out.chunks_exact_mut(oc) {
        row.copy_from_slice(bias);
    }
    T::gemm(n, ic, oc, T::one(), (inp, ic as isize, 1), (w, 1, ic as isize), T::one(), (out, oc as isize, 1));
}

/// Accumulates into `dinp`, `dw`, `dbias`.
#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Scalar>(dinp: &mut [T], dw: &mut [T], dbias: &mut [T], dout: &[T], inp: &[T], w: &[T], ic: usize, oc: usize) {
    let n = inp.len() / ic;
    T::gemm(n, oc, ic, T::one(), (dout, oc as isize, 1), (w, ic as isize, 1), T::one(), (dinp, ic as isize, 1));
    T::gemm(oc, n, ic, T::one(), (dout, 1, oc as isize), (inp, ic as isize, 1), T::one(), (dw, ic as isize, 1));
    for row in dout.chunks_exact(oc) {
        for (db, &d) in dbias.iter_mut().zip(row) {
            *db = *db + d;
        }
    }
}

fn attention_forward<T: Scalar>(out: &mut [T], att: &mut [T], qkv: &[T], batch: usize, t: usize, c: usize, nh: usize) {
    let hs = c / nh;
    let scale = T::lit(1.0 / (hs as f64).sqrt());
    let c3 = 3 * c;
    for b in 0..batch {
        for h in 0..nh {
            let base = b * t * c3 + h * hs;
            let a = &mut att[(b * nh + h) * t * t..(b * nh + h + 1) * t * t];
            T::gemm(t, hs, t, scale, (&qkv[base..], c3 as isize, 1), (&qkv[base + c..], 1, c3 as isize), T::zero(), (a, t as isize, 1));
            for i in 0..t {
                let row = &mut a[i * t..(i + 1) * t];
                let max = row[..=i].iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut sum = T::zero();
                for v in &mut row[..=i] {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                let inv = sum.recip();
                row[..=i].iter_mut().for_each(|v| *v = *v * inv);
                row[i + 1..].fill(T::zero());
            }
            let o = &mut out[b * t * c + h * hs..];
            T::gemm(t, t, hs, T::one(), (a, t as isize, 1), (&qkv[base + 2 * c..], c3 as isize, 1), T::zero(), (o, c as isize, 1));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(dqkv: &mut [T], dout: &[T], qkv: &[T], att: &[T], batch: usize, t: usize, c: usize, nh: usize) {
    let hs = c / nh;
    let scale = T::lit(1.0 / (hs as f64).sqrt());
    let c3 = 3 * c;
    let mut datt = vec![T::zero(); t * t];
    for b in 0..batch {
        for h in 0..nh {
            let base = b * t * c3 + h * hs;
            let a = &att[(b * nh + h) * t * t..(b * nh + h + 1) * t * t];
            let d_o = &dout[b * t * c + h * hs..];
            T::gemm(t, hs, t, T::one(), (d_o, c as isize, 1), (&qkv[base + 2 * c..], 1, c3 as isize), T::zero(), (&mut datt, t as isize, 1));
            T::gemm(t, t, hs, T::one(), (a, 1, t as isize), (d_o, c as isize, 1), T::one(), (&mut dqkv[base + 2 * c..], c3 as isize, 1));
            // softmax backward, in place: datt becomes d(preatt)
            for i in 0..t {
                let arow = &a[i * t..(i + 1) * t];
                let drow = &mut datt[i * t..(i + 1) * t];
                let dot = (0..=i).fold(T::zero(), |s, j| s + arow[j] * drow[j]);
                for j in 0..=i {
                    drow[j] = arow[j] * (drow[j] - dot);
                }
                drow[i + 1..].fill(T::zero());
            }
            T::gemm(t, t, hs, scale, (&datt, t as isize, 1), (&qkv[base + c..], c3 as isize, 1), T::one(), (&mut dqkv[base..], c3 as isize, 1));
            T::gemm(t, t, hs, scale, (&datt, 1, t as isize), (&qkv[base..], c3 as isize, 1), T::one(), (&mut dqkv[base + c..], c3 as isize, 1));
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let cube = T::lit(0.044715) * x * x * x;
    T::lit(0.5) * x * (T::one() + (T::lit(GELU_SCALE) * (x + cube)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cube = T::lit(0.044715) * x * x * x;
    let arg = T::lit(GELU_SCALE) * (x + cube);
    let th = arg.tanh();
    let sech2 = T::one() - th * th;
    let darg = T::lit(GELU_SCALE) * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * sech2 * darg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LmConfig {
        LmConfig { n_layers: 2, n_heads: 2, d_model: 8, context_len: 6, vocab_size: 11, dropout: 0.0 }
    }

    #[test]
    fn layout_counts_parameters() {
        let cfg = LmConfig::desk();
        let layout = ParamLayout::new(&cfg);
        let c = 128;
        let expected = 256 * c + 128 * c + 4 * (12 * c * c + 13 * c) + 2 * c;
        assert_eq!(layout.total, expected);
    }

    #[test]
    fn zero_embedding_gives_flat_logits() {
        let mut m = LmParams::<f64>::init(tiny(), 3).unwrap();
        let wte = m.layout.wte;
        m.slice_mut(wte).fill(0.0);
        let logits = m.forward_logits(&[1, 2, 3, 4, 5, 6, 7, 8], 2).unwrap();
        for b in 0..2 {
            for j in 0..4 {
                assert!(logits.at(b, j).iter().all(|&z| z == 0.0));
            }
        }
    }

    #[test]
    fn rows_are_independent() {
        let m = LmParams::<f64>::init(tiny(), 5).unwrap();
        let a = m.forward_logits(&[1, 2, 3, 9, 8, 7], 2).unwrap();
        let b = m.forward_logits(&[9, 8, 7, 1, 2, 3], 2).unwrap();
        assert_eq!(a.at(0, 2), b.at(1, 2));
        assert_eq!(a.at(1, 0), b.at(0, 0));
    }

    #[test]
    fn causal_mask_hides_future_tokens() {
        let m = LmParams::<f64>::init(tiny(), 7).unwrap();
        let base = m.forward_logits(&[1, 2, 3, 4, 5, 6], 1).unwrap();
        for j0 in 0..5 {
            let mut seq = vec![1, 2, 3, 4, 5, 6];
            for tok in seq.iter_mut().skip(j0 + 1) {
                *tok = (*tok + 4) % 11;
            }
            let other = m.forward_logits(&seq, 1).unwrap();
            for j in 0..=j0 {
                assert_eq!(base.at(0, j), other.at(0, j), "position {j} saw the future beyond {j0}");
            }
            assert_ne!(base.at(0, j0 + 1), other.at(0, j0 + 1));
        }
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        let m = LmParams::<f32>::init(tiny(), 0).unwrap();
        assert!(m.forward_logits(&[1, 11], 1).is_err());
        assert!(m.forward_logits(&[1; 7], 1).is_err());
    }

    #[test]
    fn ntp_loss_hand_values() {
        let flat = Logits::<f64> { batch: 1, len: 1, vocab: 50256, data: vec![0.0; 50256] };
        assert!((ntp_loss(&flat, &[17]).unwrap() - 50256f64.ln()).abs() < 1e-12);
        assert!((ntp_loss(&flat, &[17]).unwrap() - 10.8249).abs() < 1e-4);

        let two = Logits::<f64> { batch: 1, len: 1, vocab: 2, data: vec![0.0, 3f64.ln()] };
        assert!((ntp_loss(&two, &[1]).unwrap() - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((ntp_loss(&two, &[1]).unwrap() - 0.28768).abs() < 1e-5);

        let sure = Logits::<f64> { batch: 1, len: 1, vocab: 3, data: vec![0.0, 800.0, 0.0] };
        assert!(ntp_loss(&sure, &[1]).unwrap() < 1e-300);
        assert!(ntp_loss(&sure, &[3]).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let m = LmParams::<f64>::init(tiny(), 11).unwrap();
        let inputs = [1u32, 4, 9, 2, 7, 3, 3, 0, 10, 5];
        let targets = [4u32, 9, 2, 7, 1, 3, 0, 10, 5, 6];
        let cache = m.forward(&inputs, 2, None).unwrap();
        let mut grads = vec![0.0; m.num_params()];
        m.backward(&cache, &targets, 1.0, &mut grads).unwrap();

        let loss_at = |p: &LmParams<f64>| ntp_loss(&p.forward_logits(&inputs, 2).unwrap(), &targets).unwrap();
        let mut probe = m.clone();
        let h = 1e-5;
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let orig = probe.data[i];
            probe.data[i] = orig + h;
            let up = loss_at(&probe);
            probe.data[i] = orig - h;
            let down = loss_at(&probe);
            probe.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (fd - g).powi(2);
            norm += fd.powi(2).max(g.powi(2));
        }
        let rel = (diff / norm).sqrt();
        assert!(rel < 1e-5, "relative gradient error {rel}");
    }
}
