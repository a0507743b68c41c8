//! The learned endpoint predictor `p_theta(X_t, t)`: a small MLP over each
//! token's sphere coordinates and sinusoidal time features, with an optional
//! mean-pooled sequence context, and hand-written reverse mode.
//!
//! A token occupies `m` digit spheres of `s` coordinates each. The network
//! emits `b` logits per digit; the mask axis (when the sphere has one) gets
//! probability exactly zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridges;
use crate::error::{Error, Result};
use crate::geometry::{SimplexPoint, SpherePoint, TangentVector};
use crate::schedules::NoiseSchedule;

pub const TIME_FEATURES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    None,
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Digits per token (`m`).
    pub digits: usize,
    /// Real symbols per digit (`b`).
    pub base: usize,
    /// Whether each digit sphere carries a trailing mask axis.
    pub mask: bool,
    pub hidden: Vec<usize>,
    pub context: Context,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.digits == 0 || self.base < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least one digit of base >= 2, got {} digits of base {}",
                self.digits, self.base
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "need at least one non-empty hidden layer".into(),
            ));
        }
        Ok(())
    }

    /// Coordinates of one digit sphere.
    pub fn sphere_dim(&self) -> usize {
        self.base + usize::from(self.mask)
    }

    /// Sphere coordinates per token.
    pub fn token_dim(&self) -> usize {
        self.digits * self.sphere_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.token_dim() + TIME_FEATURES
    }

    pub fn output_dim(&self) -> usize {
        self.digits * self.base
    }

    /// `(fan_in, fan_out)` per layer; the layer after the first hidden one
    /// also sees the pooled context.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden);
        widths.push(self.output_dim());
        (0..widths.len() - 1)
            .map(|j| {
                let pooled = j == 1 && self.context == Context::MeanPool;
                (widths[j] * if pooled { 2 } else { 1 }, widths[j + 1])
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// `sin`/`cos` of `pi 2^j t / T` for `j = 0..8`.
pub fn time_features(t: f64, horizon: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    let tau = t / horizon;
    for j in 0..TIME_FEATURES / 2 {
        let w = std::f64::consts::PI * (1u64 << j) as f64 * tau;
        out[2 * j] = w.sin();
        out[2 * j + 1] = w.cos();
    }
    out
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

/// Activations kept for the backward pass of one sequence.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    len: usize,
    /// Input of each layer, `len x fan_in`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    num_params: usize,
}

/// Per-token probability vectors laid out like the sphere coordinates.
#[derive(Debug, Clone)]
pub struct ProbOutput {
    pub probs: Vec<f64>,
    pub cache: ForwardCache,
}

impl Mlp {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params();
        Ok(Self {
            arch,
            params: vec![0.0; n],
        })
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        let mut off = 0;
        for (fin, fout) in m.arch.layers() {
            let lim = (6.0 / (fin + fout) as f64).sqrt();
            for w in &mut m.params[off..off + fin * fout] {
                *w = rng.random_range(-lim..lim);
            }
            off += fin * fout + fout;
        }
        Ok(m)
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                expected: arch.num_params(),
                got: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    /// Probabilities for a sequence of `len` tokens sharing one time `t`.
    /// `x` holds `len * token_dim` sphere coordinates.
    pub fn forward(&self, x: &[f64], t: f64, horizon: f64) -> Result<ProbOutput> {
        let td = self.arch.token_dim();
        if x.is_empty() || !x.len().is_multiple_of(td) {
            return Err(Error::DimensionMismatch {
                expected: td,
                got: x.len(),
            });
        }
        let len = x.len() / td;
        let feats = time_features(t, horizon);
        let layers = self.arch.layers();
        let last = layers.len() - 1;

        let mut input = Vec::with_capacity(len * self.arch.input_dim());
        for tok in x.chunks_exact(td) {
            input.extend_from_slice(tok);
            input.extend_from_slice(&feats);
        }
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut off = 0;
        let mut logits = Vec::new();
        for (j, &(fin, fout)) in layers.iter().enumerate() {
            if j == 1 && self.arch.context == Context::MeanPool {
                input = with_context(&input, len, fin / 2);
            }
            let w = &self.params[off..off + fin * fout];
            let bias = &self.params[off + fin * fout..off + fin * fout + fout];
            off += fin * fout + fout;
            let mut z = vec![0.0; len * fout];
            for (row, zr) in input.chunks_exact(fin).zip(z.chunks_exact_mut(fout)) {
                for (o, zo) in zr.iter_mut().enumerate() {
                    let wr = &w[o * fin..(o + 1) * fin];
                    *zo = bias[o] + wr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: j });
            }
            inputs.push(std::mem::take(&mut input));
            if j < last {
                input = z.iter().map(|&v| v * sigmoid(v)).collect();
                pre.push(z);
            } else {
                logits = z;
            }
        }
        let probs = self.softmax_head(&logits, len);
        Ok(ProbOutput {
            probs,
            cache: ForwardCache {
                len,
                inputs,
                pre,
                num_params: self.params.len(),
            },
        })
    }

    fn softmax_head(&self, logits: &[f64], len: usize) -> Vec<f64> {
        let (b, s) = (self.arch.base, self.arch.sphere_dim());
        let mut probs = vec![0.0; len * self.arch.token_dim()];
        for (lg, pr) in logits.chunks_exact(b).zip(probs.chunks_exact_mut(s)) {
            let max = lg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &l) in pr.iter_mut().zip(lg) {
                *p = (l - max).exp();
                z += *p;
            }
            pr[..b].iter_mut().for_each(|p| *p /= z);
            // pr[b], the mask axis when present, stays 0.
        }
        probs
    }

    /// Gradient of a scalar loss given `d loss / d probs` (same layout as
    /// `ProbOutput::probs`). Entries on the mask axis are ignored.
    pub fn backward(&self, out: &ProbOutput, grad_probs: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(out, grad_probs, &mut grad)?;
        Ok(grad)
    }

    /// Like `backward`, accumulating into `grad`.
    pub fn backward_into(&self, out: &ProbOutput, grad_probs: &[f64], grad: &mut [f64]) -> Result<()> {
        let cache = &out.cache;
        if cache.num_params != self.params.len()
            || grad_probs.len() != out.probs.len()
            || grad.len() != self.params.len()
        {
            return Err(Error::CacheMismatch);
        }
        let (b, s) = (self.arch.base, self.arch.sphere_dim());
        let len = cache.len;
        // Softmax Jacobian per digit: g_z = p * (g - <g, p>).
        let mut g = Vec::with_capacity(len * self.arch.output_dim());
        for (p, gp) in out.probs.chunks_exact(s).zip(grad_probs.chunks_exact(s)) {
            let inner: f64 = p[..b].iter().zip(&gp[..b]).map(|(a, c)| a * c).sum();
            g.extend(p[..b].iter().zip(&gp[..b]).map(|(pi, gi)| pi * (gi - inner)));
        }

        let layers = self.arch.layers();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for &(fin, fout) in &layers {
            offsets.push(off);
            off += fin * fout + fout;
        }
        for j in (0..layers.len()).rev() {
            let (fin, fout) = layers[j];
            let o = offsets[j];
            let input = &cache.inputs[j];
            {
                let (gw, rest) = grad[o..o + fin * fout + fout].split_at_mut(fin * fout);
                for (row, gr) in input.chunks_exact(fin).zip(g.chunks_exact(fout)) {
                    for (k, &gk) in gr.iter().enumerate() {
                        if gk != 0.0 {
                            gw[k * fin..(k + 1) * fin]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(a, &x)| *a += gk * x);
                        }
                        rest[k] += gk;
                    }
                }
            }
            if j == 0 {
                break;
            }
            let w = &self.params[o..o + fin * fout];
            let mut g_in = vec![0.0; len * fin];
            for (gi, gr) in g_in.chunks_exact_mut(fin).zip(g.chunks_exact(fout)) {
                for (k, &gk) in gr.iter().enumerate() {
                    if gk != 0.0 {
                        gi.iter_mut()
                            .zip(&w[k * fin..(k + 1) * fin])
                            .for_each(|(a, &wv)| *a += gk * wv);
                    }
                }
            }
            let g_h = if j == 1 && self.arch.context == Context::MeanPool {
                let h = fin / 2;
                let mut pooled = vec![0.0; h];
                for gi in g_in.chunks_exact(fin) {
                    pooled.iter_mut().zip(&gi[h..]).for_each(|(a, &v)| *a += v);
                }
                let scale = 1.0 / len as f64;
                let mut g_h = Vec::with_capacity(len * h);
                for gi in g_in.chunks_exact(fin) {
                    g_h.extend(gi[..h].iter().zip(&pooled).map(|(a, p)| a + p * scale));
                }
                g_h
            } else {
                g_in
            };
            g = g_h
                .iter()
                .zip(&cache.pre[j - 1])
                .map(|(&gh, &z)| {
                    let sg = sigmoid(z);
                    gh * sg * (1.0 + z * (1.0 - sg))
                })
                .collect();
        }
        Ok(())
    }
}

/// Anything that maps a noised sequence at time `t` to per-digit endpoint
/// probabilities laid out like the sphere coordinates.
pub trait Predictor: Sync {
    fn arch(&self) -> &Architecture;
    fn predict(&self, x: &[f64], t: f64, horizon: f64) -> Result<Vec<f64>>;
}

impl Predictor for Mlp {
    fn arch(&self) -> &Architecture {
        &self.arch
    }

    fn predict(&self, x: &[f64], t: f64, horizon: f64) -> Result<Vec<f64>> {
        Ok(self.forward(x, t, horizon)?.probs)
    }
}

/// Appends the sequence mean of `h` (width `w`) to every row.
fn with_context(h: &[f64], len: usize, w: usize) -> Vec<f64> {
    let mut mean = vec![0.0; w];
    for row in h.chunks_exact(w) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= len as f64);
    let mut out = Vec::with_capacity(len * 2 * w);
    for row in h.chunks_exact(w) {
        out.extend_from_slice(row);
        out.extend_from_slice(&mean);
    }
    out
}

/// Drift of the parameterized mixture: `sum_k p_k eta^k(x, t)`.
pub fn parameterized_drift(
    x: &SpherePoint,
    probs: &SimplexPoint,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<TangentVector> {
    bridges::mixture_drift(x, probs, t, schedule)
}
