//! Generation by the parameterized mixture SDE, the likelihood bound along
//! simulated bridges, and unigram diagnostics.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridges;
use crate::error::{Error, Result};
use crate::geometry::{self, SpherePoint};
use crate::predictor::Predictor;
use crate::rng;
use crate::schedules::NoiseSchedule;
use crate::training::{self, Mode, SplitCodec, Start};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Geodesic random walk steps `M`.
    pub steps: usize,
    pub len: usize,
    pub num: usize,
    pub lambda: f64,
    pub stop_delta: f64,
    pub seed: u64,
    /// Multiplies `sigma_t`; 0 follows the drift alone.
    pub noise_scale: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            len: 16,
            num: 16,
            lambda: 0.5,
            stop_delta: 1e-3,
            seed: 0,
            noise_scale: 1.0,
        }
    }
}

fn check_compatible<P: Predictor>(predictor: &P, codec: &SplitCodec) -> Result<()> {
    let a = predictor.arch();
    if a.digits != codec.digits || a.base != codec.base || a.mask != codec.has_mask() {
        return Err(Error::CheckpointMismatch(format!(
            "predictor expects {} digits of base {} (mask {}), run uses {} of base {} (mask {})",
            a.digits,
            a.base,
            a.mask,
            codec.digits,
            codec.base,
            codec.has_mask()
        )));
    }
    Ok(())
}

/// Initial points of the `m` digit spheres of one token: the mask with
/// probability `lambda`, the barycenter otherwise.
pub fn mixture_init<R: Rng + ?Sized>(lambda: f64, codec: &SplitCodec, rng: &mut R) -> Result<Vec<SpherePoint>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfDomain {
            what: "mixing weight lambda must lie in [0, 1]",
            value: lambda,
        });
    }
    if lambda > 0.0 && !codec.has_mask() {
        return Err(Error::InvalidParameter("uniform mode has no mask axis".into()));
    }
    (0..codec.digits)
        .map(|_| {
            let start = if lambda > 0.0 && rng.random::<f64>() < lambda {
                Start::Mask
            } else {
                Start::Barycenter
            };
            codec.start_point(start)
        })
        .collect()
}

/// Flat initial state of `len` tokens for the codec's mode.
pub fn initial_state<R: Rng + ?Sized>(codec: &SplitCodec, lambda: f64, len: usize, rng: &mut R) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(len * codec.token_dim());
    match codec.mode {
        Mode::Masked | Mode::Uniform => {
            let start = if codec.mode == Mode::Masked {
                Start::Mask
            } else {
                Start::Barycenter
            };
            let p = codec.start_point(start)?;
            for _ in 0..len * codec.digits {
                x.extend_from_slice(p.coords());
            }
        }
        Mode::Mixture => {
            for _ in 0..len {
                for p in mixture_init(lambda, codec, rng)? {
                    x.extend_from_slice(p.coords());
                }
            }
        }
    }
    Ok(x)
}

/// Runs `steps` geodesic random walk steps of the parameterized mixture on
/// `[0, T - delta]`, coefficients at the left point. `noise` fills one
/// ambient standard normal vector per digit sphere and step; it is not
/// called when `noise_scale` is 0.
#[allow(clippy::too_many_arguments)]
pub fn evolve<P: Predictor, F: FnMut(&mut [f64])>(
    predictor: &P,
    codec: &SplitCodec,
    schedule: &NoiseSchedule,
    x: &mut [f64],
    steps: usize,
    stop_delta: f64,
    noise_scale: f64,
    mut noise: F,
) -> Result<()> {
    let horizon = schedule.horizon;
    if steps == 0 || !(stop_delta > 0.0 && stop_delta < horizon) {
        return Err(Error::InvalidParameter(format!(
            "need steps >= 1 and stop_delta in (0, {horizon}), got {steps} and {stop_delta}"
        )));
    }
    let s = codec.sphere_dim();
    let dt = (horizon - stop_delta) / steps as f64;
    let mut drift = vec![0.0; s];
    let mut w = vec![0.0; s];
    let mut base = vec![0.0; s];
    for i in 0..steps {
        let t = i as f64 * dt;
        let probs = predictor.predict(x, t, horizon)?;
        let gamma = schedule.gamma(t)?;
        let scale = noise_scale * schedule.sigma(t) * dt.sqrt();
        for (xc, pc) in x.chunks_exact_mut(s).zip(probs.chunks_exact(s)) {
            bridges::vertex_mixture_drift_raw(xc, pc, gamma, &mut drift)?;
            if scale > 0.0 {
                noise(&mut w);
                w.iter_mut().zip(&drift).for_each(|(v, d)| *v = d * dt + scale * *v);
            } else {
                w.iter_mut().zip(&drift).for_each(|(v, d)| *v = d * dt);
            }
            geometry::project_raw(xc, &mut w);
            base.copy_from_slice(xc);
            geometry::exp_map_raw(&base, &w, xc);
        }
    }
    Ok(())
}

/// Per-digit argmax over the non-mask axes, then split decoding.
pub fn decode_state(codec: &SplitCodec, x: &[f64]) -> Result<Vec<usize>> {
    let s = codec.sphere_dim();
    let mut digits = vec![0; codec.digits];
    x.chunks_exact(codec.token_dim())
        .map(|tok| {
            for (d, xc) in digits.iter_mut().zip(tok.chunks_exact(s)) {
                *d = geometry::argmax(&xc[..codec.base]);
            }
            codec.decode(&digits)
        })
        .collect()
}

/// Generates `config.num` sequences; sequence `i` uses its own stream.
pub fn sample_sequences<P: Predictor>(
    predictor: &P,
    codec: &SplitCodec,
    schedule: &NoiseSchedule,
    config: &SampleConfig,
) -> Result<Vec<Vec<usize>>> {
    check_compatible(predictor, codec)?;
    if config.len == 0 {
        return Err(Error::InvalidParameter("sequence length must be positive".into()));
    }
    (0..config.num)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::indexed(config.seed, "sample", i as u64);
            let mut x = initial_state(codec, config.lambda, config.len, &mut rng)?;
            evolve(
                predictor,
                codec,
                schedule,
                &mut x,
                config.steps,
                config.stop_delta,
                config.noise_scale,
                |w| rng::fill_normal(&mut rng, w),
            )?;
            decode_state(codec, &x)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NllConfig {
    /// Quadrature times `Q` on `[0, T - delta]`.
    pub quad: usize,
    /// Bridge draws `R` per sequence.
    pub draws: usize,
    /// Simulation steps between consecutive quadrature times.
    pub substeps: usize,
    pub lambda: f64,
    pub stop_delta: f64,
    pub seed: u64,
}

impl Default for NllConfig {
    fn default() -> Self {
        Self {
            quad: 64,
            draws: 4,
            substeps: 8,
            lambda: 0.5,
            stop_delta: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub nll_nats_per_token: f64,
    pub bpc_or_bpd: f64,
    pub mc_std_error: f64,
    pub num_quadrature_times: usize,
    pub num_noise_samples: usize,
}

/// Bound of one bridge draw for one sequence, in nats per token.
fn nll_one<P: Predictor, R: Rng + ?Sized>(
    predictor: &P,
    codec: &SplitCodec,
    schedule: &NoiseSchedule,
    tokens: &[usize],
    config: &NllConfig,
    rng: &mut R,
) -> Result<f64> {
    let (m, s) = (codec.digits, codec.sphere_dim());
    let mut digits = vec![0; tokens.len() * m];
    for (tok, slot) in tokens.iter().zip(digits.chunks_exact_mut(m)) {
        codec.encode_into(*tok, slot)?;
    }
    let mut x = initial_state(codec, config.lambda, tokens.len(), rng)?;
    let span = schedule.horizon - config.stop_delta;
    let intervals = config.quad - 1;
    let dt = span / (intervals * config.substeps) as f64;
    let mut target = vec![0.0; s];
    let mut drift = vec![0.0; s];
    let mut scratch = vec![0.0; s];
    let mut grad = vec![0.0; s];
    let mut integral = 0.0;
    for q in 0..config.quad {
        let t = q as f64 * span / intervals as f64;
        let probs = predictor.predict(&x, t, schedule.horizon)?;
        let mut f = 0.0;
        for (i, &k) in digits.iter().enumerate() {
            let r = i * s..(i + 1) * s;
            f += training::loss_mse(&probs[r.clone()], &x[r], k, t, schedule, &mut grad)?;
        }
        let w = if q == 0 || q == intervals { 0.5 } else { 1.0 };
        integral += w * f * span / intervals as f64;
        if q == intervals {
            break;
        }
        for j in 0..config.substeps {
            let tau = (q * config.substeps + j) as f64 * dt;
            let (gamma, sigma) = (schedule.gamma(tau)?, schedule.sigma(tau));
            for (&k, xc) in digits.iter().zip(x.chunks_exact_mut(s)) {
                target.iter_mut().for_each(|v| *v = 0.0);
                target[k] = 1.0;
                bridges::bridge_drift_raw(xc, &target, gamma, &mut drift)?;
                bridges::step_grw_raw(xc, &drift, sigma, dt, rng, &mut scratch);
            }
        }
    }
    Ok(integral / tokens.len() as f64)
}

/// Monte-Carlo estimate of the likelihood bound along simulated bridges,
/// trapezoid in time. The standard error is over (sequence, draw) pairs.
pub fn estimate_nll<P: Predictor>(
    predictor: &P,
    codec: &SplitCodec,
    schedule: &NoiseSchedule,
    data: &[Vec<usize>],
    config: &NllConfig,
) -> Result<NllReport> {
    check_compatible(predictor, codec)?;
    if config.quad < 8 || config.draws == 0 || config.substeps == 0 {
        return Err(Error::InvalidParameter(format!(
            "need quad >= 8, draws >= 1 and substeps >= 1, got {}, {}, {}",
            config.quad, config.draws, config.substeps
        )));
    }
    if data.is_empty() || data.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidParameter("evaluation needs non-empty sequences".into()));
    }
    let r = config.draws;
    let values: Vec<f64> = (0..data.len() * r)
        .into_par_iter()
        .map(|u| {
            let mut rng = rng::indexed(config.seed, "eval/nll", u as u64);
            nll_one(predictor, codec, schedule, &data[u / r], config, &mut rng)
        })
        .collect::<Result<_>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(NllReport {
        nll_nats_per_token: mean,
        bpc_or_bpd: to_bits(mean, 1.0)?,
        mc_std_error: se,
        num_quadrature_times: config.quad,
        num_noise_samples: r,
    })
}

pub fn to_bits(nll_nats: f64, chars_per_token: f64) -> Result<f64> {
    if !(chars_per_token > 0.0) || nll_nats < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "need nll >= 0 and chars per token > 0, got {nll_nats} and {chars_per_token}"
        )));
    }
    Ok(nll_nats / std::f64::consts::LN_2 / chars_per_token)
}

/// Empirical unigram frequencies.
pub fn unigram(seqs: &[Vec<usize>], vocab: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; vocab];
    let mut total = 0usize;
    for &tok in seqs.iter().flatten() {
        if tok >= vocab {
            return Err(Error::TokenOutOfRange { token: tok, vocab });
        }
        counts[tok] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::InvalidParameter("no tokens".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub tv: f64,
    pub sample: Vec<f64>,
    pub reference: Vec<f64>,
}

impl Marginals {
    /// Histogram with header `token,sample,reference`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "token,sample,reference")?;
        for (i, (a, b)) in self.sample.iter().zip(&self.reference).enumerate() {
            writeln!(w, "{i},{a},{b}")?;
        }
        Ok(())
    }
}

pub fn marginal_diagnostics(samples: &[Vec<usize>], reference: &[Vec<usize>], vocab: usize) -> Result<Marginals> {
    let sample = unigram(samples, vocab)?;
    let reference = unigram(reference, vocab)?;
    Ok(Marginals {
        tv: tv_distance(&sample, &reference),
        sample,
        reference,
    })
}
