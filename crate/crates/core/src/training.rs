//! Simulation-free training: the dimension-splitting codec, the three
//! objectives, AdamW with an EMA shadow, the training step and checkpoints.
//!
//! A token of a vocabulary of size `d` is written in base `b` as `m` digits.
//! Each digit lives on its own sphere of `b` coordinates, plus a trailing
//! mask axis when the mode can start from the mask.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridges;
use crate::datasets::DataSource;
use crate::error::{Error, Result};
use crate::geometry::{self, SpherePoint};
use crate::precompute::{self, PrecomputedTable, TableConfig};
use crate::predictor::{Architecture, Context, Mlp};
use crate::rng;
use crate::rnormal::VertexSampler;
use crate::schedules::{NoiseSchedule, TimeProposal};

/// Vocabulary size above which the codec splits by default.
pub const SPLIT_THRESHOLD: usize = 512;
pub const DEFAULT_SPLIT_BASE: usize = 16;
/// Floor applied to the target probability inside `-log p`.
pub const PROB_CLIP: f64 = 1e-12;
pub const TABLESET_MAGIC: &[u8; 5] = b"RNTS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Masked,
    Uniform,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce_importance")]
    CeImportance,
}

/// Which initial point a digit sphere starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Start {
    Mask,
    Barycenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCodec {
    pub vocab: usize,
    pub base: usize,
    pub digits: usize,
    pub mode: Mode,
}

impl SplitCodec {
    /// `base = None` picks 16 above 512 symbols and no split otherwise.
    pub fn new(vocab: usize, base: Option<usize>, mode: Mode) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidParameter(format!(
                "vocabulary size must be >= 2, got {vocab}"
            )));
        }
        let base = base.unwrap_or(if vocab > SPLIT_THRESHOLD {
            DEFAULT_SPLIT_BASE
        } else {
            vocab
        });
        if base < 2 || base > vocab {
            return Err(Error::InvalidParameter(format!(
                "split base must lie in [2, {vocab}], got {base}"
            )));
        }
        let mut digits = 1;
        let mut cap = base;
        while cap < vocab {
            cap = cap.saturating_mul(base);
            digits += 1;
        }
        Ok(Self {
            vocab,
            base,
            digits,
            mode,
        })
    }

    pub fn has_mask(&self) -> bool {
        self.mode != Mode::Uniform
    }

    pub fn sphere_dim(&self) -> usize {
        self.base + usize::from(self.has_mask())
    }

    /// Index of the mask coordinate on every digit sphere.
    pub fn mask_axis(&self) -> usize {
        self.base
    }

    pub fn token_dim(&self) -> usize {
        self.digits * self.sphere_dim()
    }

    /// Big-endian base-`b` digits of `k` into `out`.
    pub fn encode_into(&self, k: usize, out: &mut [usize]) -> Result<()> {
        if k >= self.vocab {
            return Err(Error::TokenOutOfRange {
                token: k,
                vocab: self.vocab,
            });
        }
        let mut rest = k;
        for slot in out[..self.digits].iter_mut().rev() {
            *slot = rest % self.base;
            rest /= self.base;
        }
        Ok(())
    }

    pub fn encode(&self, k: usize) -> Result<Vec<usize>> {
        let mut out = vec![0; self.digits];
        self.encode_into(k, &mut out)?;
        Ok(out)
    }

    pub fn decode(&self, digits: &[usize]) -> Result<usize> {
        if digits.len() != self.digits {
            return Err(Error::DimensionMismatch {
                expected: self.digits,
                got: digits.len(),
            });
        }
        let mut k = 0usize;
        for &g in digits {
            if g >= self.base {
                return Err(Error::TokenOutOfRange {
                    token: g,
                    vocab: self.base,
                });
            }
            k = k * self.base + g;
        }
        if k >= self.vocab {
            return Err(Error::TokenOutOfRange {
                token: k,
                vocab: self.vocab,
            });
        }
        Ok(k)
    }

    pub fn start_point(&self, start: Start) -> Result<SpherePoint> {
        match start {
            Start::Mask if self.has_mask() => SpherePoint::one_hot(self.sphere_dim(), self.mask_axis()),
            Start::Mask => Err(Error::InvalidParameter("uniform mode has no mask axis".into())),
            Start::Barycenter => SpherePoint::barycenter(self.sphere_dim(), self.base),
        }
    }

    /// Predictor shape for this codec.
    pub fn architecture(&self, hidden: Vec<usize>, context: Context) -> Architecture {
        Architecture {
            digits: self.digits,
            base: self.base,
            mask: self.has_mask(),
            hidden,
            context,
        }
    }
}

/// Parameter tables for the initial points the mode can use.
#[derive(Debug, Clone)]
pub struct TableSet {
    pub mask: Option<PrecomputedTable>,
    pub barycenter: Option<PrecomputedTable>,
}

impl TableSet {
    pub fn build(codec: &SplitCodec, schedule: &NoiseSchedule, config: &TableConfig, seed: u64) -> Result<Self> {
        let make = |start| -> Result<PrecomputedTable> {
            precompute::build_table(&codec.start_point(start)?, codec.base, schedule, config, seed)
        };
        Ok(Self {
            mask: if codec.has_mask() {
                Some(make(Start::Mask)?)
            } else {
                None
            },
            barycenter: if codec.mode == Mode::Masked {
                None
            } else {
                Some(make(Start::Barycenter)?)
            },
        })
    }

    pub fn get(&self, start: Start) -> Result<&PrecomputedTable> {
        match start {
            Start::Mask => self.mask.as_ref(),
            Start::Barycenter => self.barycenter.as_ref(),
        }
        .ok_or_else(|| Error::TableMismatch(format!("no table for the {start:?} start")))
    }

    /// Magic, a presence byte (bit 0 mask, bit 1 barycenter), then the tables.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TABLESET_MAGIC)?;
        w.write_all(&[u8::from(self.mask.is_some()) | u8::from(self.barycenter.is_some()) << 1])?;
        for t in self.mask.iter().chain(&self.barycenter) {
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != TABLESET_MAGIC {
            return Err(Error::Format("not a table file".into()));
        }
        let mut flags = [0u8; 1];
        r.read_exact(&mut flags)?;
        if flags[0] == 0 || flags[0] > 3 {
            return Err(Error::Format(format!("bad table presence flags {}", flags[0])));
        }
        let mask = if flags[0] & 1 != 0 {
            Some(PrecomputedTable::read_from(r)?)
        } else {
            None
        };
        let barycenter = if flags[0] & 2 != 0 {
            Some(PrecomputedTable::read_from(r)?)
        } else {
            None
        };
        Ok(Self { mask, barycenter })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    /// Every table the codec's mode needs is present and fits its sphere.
    pub fn check(&self, codec: &SplitCodec, schedule: &NoiseSchedule) -> Result<()> {
        let mut starts = vec![];
        if codec.has_mask() {
            starts.push(Start::Mask);
        }
        if codec.mode != Mode::Masked {
            starts.push(Start::Barycenter);
        }
        for start in starts {
            let table = self.get(start)?;
            let psi0 = codec.start_point(start)?.coords()[0];
            table.check_matches(codec.sphere_dim(), psi0)?;
            if table.provenance.schedule != *schedule {
                return Err(Error::TableMismatch(format!(
                    "table schedule {:?} differs from the run schedule {schedule:?}",
                    table.provenance.schedule
                )));
            }
        }
        Ok(())
    }
}

/// `(1/2) sigma_t^{-2} |sum_l p_l eta^l - eta^k|^2` on one digit sphere, with
/// its gradient with respect to `probs` written into `grad`.
pub fn loss_mse(probs: &[f64], x: &[f64], k: usize, t: f64, schedule: &NoiseSchedule, grad: &mut [f64]) -> Result<f64> {
    let gamma = schedule.gamma(t)?;
    let sigma2 = schedule.sigma(t).powi(2);
    let mut diff = vec![0.0; x.len()];
    bridges::vertex_mixture_drift_raw(x, probs, gamma, &mut diff)?;
    let mut own = vec![0.0; x.len()];
    let mut target = vec![0.0; x.len()];
    target[k] = 1.0;
    bridges::bridge_drift_raw(x, &target, gamma, &mut own)?;
    diff.iter_mut().zip(&own).for_each(|(a, b)| *a -= b);
    // d/dp_l = sigma^-2 <D, eta^l>, eta^l = gamma f_l (e_l - x_l x).
    let along_x = geometry::dot(&diff, x);
    for (l, g) in grad.iter_mut().enumerate() {
        let (f, _) = bridges::vertex_log_factor(x[l])?;
        *g = gamma * f * (diff[l] - x[l] * along_x) / sigma2;
    }
    Ok(0.5 * geometry::dot(&diff, &diff) / sigma2)
}

/// `-log p_k` with the probability floored at [`PROB_CLIP`]; `clipped` counts
/// floored evaluations.
pub fn loss_ce(probs: &[f64], k: usize, grad: &mut [f64], clipped: &mut usize) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let p = probs[k];
    if p < PROB_CLIP {
        *clipped += 1;
        // Flat below the floor.
        return -PROB_CLIP.ln();
    }
    grad[k] = -1.0 / p;
    -p.ln()
}

/// `-log p_k / q(t)`.
pub fn loss_ce_importance(
    probs: &[f64],
    k: usize,
    t: f64,
    proposal: &TimeProposal,
    grad: &mut [f64],
    clipped: &mut usize,
) -> Result<f64> {
    let q = proposal.density(t);
    if !(q > 0.0) {
        return Err(Error::OutOfDomain {
            what: "proposal density must be positive at the sampled time",
            value: t,
        });
    }
    let v = loss_ce(probs, k, grad, clipped) / q;
    grad.iter_mut().for_each(|g| *g /= q);
    Ok(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub proposal: TimeProposal,
    /// Probability that a digit sphere starts at the mask in mixture mode.
    pub lambda: f64,
    pub stop_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::CeImportance,
            batch_size: 32,
            seq_len: 16,
            steps: 1000,
            lr: 1e-3,
            weight_decay: 0.0,
            ema_decay: 0.9999,
            grad_clip: 1.0,
            seed: 0,
            proposal: TimeProposal::default_for(1.0),
            lambda: 0.5,
            stop_delta: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::InvalidParameter(
                "batch size and sequence length must be positive".into(),
            ));
        }
        for (name, v) in [("lr", self.lr), ("grad_clip", self.grad_clip)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter(
                "ema_decay must lie in [0, 1), weight_decay >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::OutOfDomain {
                what: "mixing weight lambda must lie in [0, 1]",
                value: self.lambda,
            });
        }
        if !(self.stop_delta > 0.0 && self.stop_delta < schedule.horizon) {
            return Err(Error::OutOfDomain {
                what: "stop_delta must lie in (0, T)",
                value: self.stop_delta,
            });
        }
        if (self.proposal.horizon - schedule.horizon).abs() > 1e-12 {
            return Err(Error::InvalidParameter(
                "proposal horizon differs from the schedule".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * ((*m / c1) / ((*v / c2).sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}

/// Exponential moving average of the parameters with warm-up
/// `min(decay, (1 + n) / (10 + n))`.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<f64>,
    updates: u64,
}

impl Ema {
    pub fn new(params: &[f64], decay: f64) -> Self {
        Self {
            decay,
            shadow: params.to_vec(),
            updates: 0,
        }
    }

    pub fn update(&mut self, params: &[f64]) {
        let n = self.updates as f64;
        let r = self.decay.min((1.0 + n) / (10.0 + n));
        self.shadow
            .iter_mut()
            .zip(params)
            .for_each(|(s, &p)| *s = r * *s + (1.0 - r) * p);
        self.updates += 1;
    }
}

/// How `X_t` is drawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XtMethod {
    /// Riemannian normal from the precomputed table.
    Table,
    /// Geodesic random walk of the bridge with this many steps up to `t`.
    Simulated { steps: usize },
}

/// One noised training sequence.
#[derive(Debug, Clone)]
pub struct NoisyItem {
    pub t: f64,
    /// Monte-Carlo weight turning the loss at `t` into a time integral.
    pub weight: f64,
    /// Sphere coordinates, `len x token_dim`.
    pub x: Vec<f64>,
    /// Target digits, `len x m`.
    pub digits: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub clipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub clipped: usize,
    pub wall_ms: f64,
}

pub const LOG_HEADER: &str = "step,loss,grad_norm,wall_ms";

impl StepStats {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{:.3}", self.step, self.loss, self.grad_norm, self.wall_ms)
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Mlp,
    pub codec: SplitCodec,
    pub schedule: NoiseSchedule,
    pub tables: TableSet,
    pub config: TrainConfig,
    pub ema: Ema,
    pub xt_method: XtMethod,
    opt: AdamW,
    step: usize,
    mask_start: Option<SpherePoint>,
    bary_start: Option<SpherePoint>,
}

impl Trainer {
    pub fn new(
        model: Mlp,
        codec: SplitCodec,
        schedule: NoiseSchedule,
        tables: TableSet,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate(&schedule)?;
        check_model(&model.arch, &codec)?;
        tables.check(&codec, &schedule)?;
        let opt = AdamW::new(model.params.len(), config.lr, config.weight_decay);
        let ema = Ema::new(&model.params, config.ema_decay);
        Ok(Self {
            mask_start: codec.has_mask().then(|| codec.start_point(Start::Mask)).transpose()?,
            bary_start: (codec.mode != Mode::Masked)
                .then(|| codec.start_point(Start::Barycenter))
                .transpose()?,
            model,
            codec,
            schedule,
            tables,
            config,
            ema,
            xt_method: XtMethod::Table,
            opt,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn start_for<R: Rng + ?Sized>(&self, rng: &mut R) -> Start {
        match self.codec.mode {
            Mode::Masked => Start::Mask,
            Mode::Uniform => Start::Barycenter,
            Mode::Mixture => {
                if rng.random::<f64>() < self.config.lambda {
                    Start::Mask
                } else {
                    Start::Barycenter
                }
            }
        }
    }

    fn start_point(&self, start: Start) -> &SpherePoint {
        match start {
            Start::Mask => self.mask_start.as_ref(),
            Start::Barycenter => self.bary_start.as_ref(),
        }
        .expect("start points exist for every start the mode draws")
    }

    /// Draws the time and `X_t` for one sequence at a given time.
    pub fn noise_at<R: Rng + ?Sized>(&self, tokens: &[usize], t: f64, weight: f64, rng: &mut R) -> Result<NoisyItem> {
        let (m, s) = (self.codec.digits, self.codec.sphere_dim());
        let mut digits = vec![0; tokens.len() * m];
        for (tok, slot) in tokens.iter().zip(digits.chunks_exact_mut(m)) {
            self.codec.encode_into(*tok, slot)?;
        }
        let mut x = vec![0.0; digits.len() * s];
        let mut scratch = vec![0.0; s];
        for (&k, out) in digits.iter().zip(x.chunks_exact_mut(s)) {
            let start = self.start_for(rng);
            let x0 = self.start_point(start);
            match self.xt_method {
                XtMethod::Table => {
                    VertexSampler::new(self.tables.get(start)?, x0).draw(k, t, rng, out, &mut scratch)?;
                }
                XtMethod::Simulated { steps } => {
                    simulate_to(x0.coords(), k, t, steps, &self.schedule, rng, out, &mut scratch)?;
                }
            }
        }
        Ok(NoisyItem { t, weight, x, digits })
    }

    /// Samples `t` per the objective and noises one sequence.
    pub fn noise<R: Rng + ?Sized>(&self, tokens: &[usize], rng: &mut R) -> Result<NoisyItem> {
        let horizon = self.schedule.horizon;
        let (t, weight) = match self.config.objective {
            Objective::Mse => {
                let span = horizon - self.config.stop_delta;
                (rng.random::<f64>() * span, span)
            }
            Objective::Ce => (rng.random::<f64>() * horizon, horizon),
            Objective::CeImportance => (self.config.proposal.sample(rng), 1.0),
        };
        self.noise_at(tokens, t, weight, rng)
    }

    /// Loss of one noised sequence per token; accumulates the parameter
    /// gradient into `grad`.
    pub fn item_loss(&self, model: &Mlp, item: &NoisyItem, grad: &mut [f64], clipped: &mut usize) -> Result<f64> {
        let out = model.forward(&item.x, item.t, self.schedule.horizon)?;
        let s = self.codec.sphere_dim();
        let len = item.digits.len() / self.codec.digits;
        let scale = item.weight / len as f64;
        let mut g = vec![0.0; out.probs.len()];
        let mut total = 0.0;
        for (i, &k) in item.digits.iter().enumerate() {
            let r = i * s..(i + 1) * s;
            let (p, gs) = (&out.probs[r.clone()], &mut g[r.clone()]);
            total += match self.config.objective {
                Objective::Mse => loss_mse(p, &item.x[r], k, item.t, &self.schedule, gs)?,
                Objective::Ce => loss_ce(p, k, gs, clipped),
                Objective::CeImportance => loss_ce_importance(p, k, item.t, &self.config.proposal, gs, clipped)?,
            };
        }
        g.iter_mut().for_each(|v| *v *= scale);
        model.backward_into(&out, &g, grad)?;
        Ok(total * scale)
    }

    /// Mean loss and gradient over a batch, with the noise of step `step`.
    pub fn evaluate(&self, model: &Mlp, batch: &[Vec<usize>], step: usize) -> Result<BatchEval> {
        let stream = format!("train/step_{step}");
        let n = model.params.len();
        let parts: Vec<Result<(f64, Vec<f64>, usize)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, tokens)| {
                let mut rng = rng::indexed(self.config.seed, &stream, i as u64);
                let item = self.noise(tokens, &mut rng)?;
                let mut grad = vec![0.0; n];
                let mut clipped = 0;
                let loss = self.item_loss(model, &item, &mut grad, &mut clipped)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { batch: i });
                }
                Ok((loss, grad, clipped))
            })
            .collect();
        let mut eval = BatchEval {
            loss: 0.0,
            grad: vec![0.0; n],
            clipped: 0,
        };
        for part in parts {
            let (loss, grad, clipped) = part?;
            eval.loss += loss;
            eval.grad.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
            eval.clipped += clipped;
        }
        let inv = 1.0 / batch.len() as f64;
        eval.loss *= inv;
        eval.grad.iter_mut().for_each(|g| *g *= inv);
        Ok(eval)
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[Vec<usize>]) -> Result<StepStats> {
        let started = Instant::now();
        let mut eval = self.evaluate(&self.model, batch, self.step)?;
        let grad_norm = geometry::norm(&eval.grad);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { batch: 0 });
        }
        if grad_norm > self.config.grad_clip {
            let c = self.config.grad_clip / grad_norm;
            eval.grad.iter_mut().for_each(|g| *g *= c);
        }
        self.opt.step(&mut self.model.params, &eval.grad);
        self.ema.update(&self.model.params);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: eval.loss,
            grad_norm,
            clipped: eval.clipped,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs `config.steps` steps on batches drawn from `data`.
    pub fn fit<F: FnMut(&StepStats)>(&mut self, data: &DataSource, mut log: F) -> Result<()> {
        if data.vocab() != self.codec.vocab {
            return Err(Error::DimensionMismatch {
                expected: self.codec.vocab,
                got: data.vocab(),
            });
        }
        while self.step < self.config.steps {
            let mut rng = rng::indexed(self.config.seed, "train/data", self.step as u64);
            let batch = data.batch(self.config.batch_size, self.config.seq_len, &mut rng)?;
            let stats = self.train_step(&batch)?;
            log(&stats);
        }
        Ok(())
    }

    /// Parameters for evaluation: the EMA shadow.
    pub fn ema_model(&self) -> Mlp {
        Mlp {
            arch: self.model.arch.clone(),
            params: self.ema.shadow.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            descriptor: Descriptor::new(&self.model.arch, &self.codec, &self.schedule, self.config.lambda),
            params: self.model.params.clone(),
            ema: Some(self.ema.shadow.clone()),
        }
    }
}

/// Bridge from `x0` toward `e_k` by geodesic random walk up to `t`.
#[allow(clippy::too_many_arguments)]
fn simulate_to<R: Rng + ?Sized>(
    x0: &[f64],
    k: usize,
    t: f64,
    steps: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
    out: &mut [f64],
    scratch: &mut [f64],
) -> Result<()> {
    out.copy_from_slice(x0);
    if t <= 0.0 || steps == 0 {
        return Ok(());
    }
    let dt = t / steps as f64;
    let mut target = vec![0.0; x0.len()];
    target[k] = 1.0;
    let mut drift = vec![0.0; x0.len()];
    for i in 0..steps {
        let tau = i as f64 * dt;
        bridges::bridge_drift_raw(out, &target, schedule.gamma(tau)?, &mut drift)?;
        bridges::step_grw_raw(out, &drift, schedule.sigma(tau), dt, rng, scratch);
    }
    Ok(())
}

fn check_model(arch: &Architecture, codec: &SplitCodec) -> Result<()> {
    if arch.digits != codec.digits || arch.base != codec.base || arch.mask != codec.has_mask() {
        return Err(Error::CheckpointMismatch(format!(
            "predictor has {} digits of base {} (mask {}), codec has {} of base {} (mask {})",
            arch.digits,
            arch.base,
            arch.mask,
            codec.digits,
            codec.base,
            codec.has_mask()
        )));
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"RDLMCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub arch: Architecture,
    pub codec: SplitCodec,
    pub schedule: NoiseSchedule,
    pub lambda: f64,
    pub arch_hash: String,
}

impl Descriptor {
    pub fn new(arch: &Architecture, codec: &SplitCodec, schedule: &NoiseSchedule, lambda: f64) -> Self {
        Self {
            arch: arch.clone(),
            codec: *codec,
            schedule: *schedule,
            lambda,
            arch_hash: arch_hash(arch),
        }
    }
}

/// SHA-256 of the architecture's JSON form, hex encoded.
pub fn arch_hash(arch: &Architecture) -> String {
    let json = serde_json::to_vec(arch).expect("architecture serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: Descriptor,
    pub params: Vec<f64>,
    pub ema: Option<Vec<f64>>,
}

fn write_floats<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_floats<R: Read>(r: &mut R, expected: usize) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    if n != expected {
        return Err(Error::Format(format!("expected {expected} parameters, found {n}")));
    }
    (0..n).map(|_| read_u64(r).map(f64::from_bits)).collect()
}

impl Checkpoint {
    /// The model with raw (`ema = false`) or EMA parameters.
    pub fn model(&self, ema: bool) -> Result<Mlp> {
        let params = match (&self.ema, ema) {
            (Some(e), true) => e.clone(),
            (None, true) => return Err(Error::CheckpointMismatch("checkpoint has no EMA parameters".into())),
            _ => self.params.clone(),
        };
        Mlp::from_params(self.descriptor.arch.clone(), params)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let json = serde_json::to_vec(&self.descriptor).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        write_floats(w, &self.params)?;
        match &self.ema {
            Some(e) => {
                w.write_all(&[1])?;
                write_floats(w, e)?;
            }
            None => w.write_all(&[0])?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let n = read_u64(r)? as usize;
        if n > 1 << 20 {
            return Err(Error::Format(format!("descriptor of {n} bytes")));
        }
        let mut json = vec![0u8; n];
        r.read_exact(&mut json)?;
        let descriptor: Descriptor = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        if descriptor.arch_hash != arch_hash(&descriptor.arch) {
            return Err(Error::Format("architecture hash does not match the descriptor".into()));
        }
        descriptor.arch.validate()?;
        check_model(&descriptor.arch, &descriptor.codec)?;
        let count = descriptor.arch.num_params();
        let params = read_floats(r, count)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ema = match flag[0] {
            0 => None,
            1 => Some(read_floats(r, count)?),
            f => return Err(Error::Format(format!("bad EMA flag {f}"))),
        };
        if params.iter().chain(ema.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(Self {
            descriptor,
            params,
            ema,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
