//! Simulation-free transition parameters.
//!
//! The bridge law at time `t` is replaced by a Riemannian normal with mean
//! `mu_t` on the `x0`-`xT` great circle and isotropic tangent spread `rho_t`.
//! Both come from the means of two scalar projections of the bridge,
//! `z^T = <X_t, X_T>` and `z^0 = <X_t, X_0>`, which are cheap to simulate.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::ChiSquared;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridges;
use crate::error::{Error, Result};
use crate::geometry::SpherePoint;
use crate::rng::{self, StreamRng};
use crate::schedules::NoiseSchedule;

/// Largest series argument `rho^2 / 2` summed directly.
pub const SERIES_ARG_MAX: f64 = 50.0;
/// Monotone-domain scans stop here even if `F` keeps decreasing.
pub const RHO_CAP: f64 = 10.0;
/// Scalar projections are kept this far inside `[-1, 1]`.
pub const PROJ_CLAMP: f64 = 1e-7;
/// Calibration applies to spheres with fewer ambient coordinates than this.
pub const CALIBRATION_DIM: usize = 16;
pub const CALIBRATION_CHECKPOINTS: usize = 8;
const CALIBRATION_TRAJECTORIES: usize = 2048;
const MC_FALLBACK_SAMPLES: usize = 200_000;
const MC_FALLBACK_SEED: u64 = 0x6b756d6d6572;
const BLOCK: usize = 256;

/// `F_n(rho) = E cos(rho |z|)` for `z` standard normal in `R^n`.
///
/// Equal to `1F1(n/2; 1/2; -x)` with `x = rho^2/2`; evaluated as
/// `e^{-x} 1F1((1-n)/2; 1/2; x)`, whose series terminates for odd `n`.
/// Beyond `x = 50` a fixed-seed Monte Carlo estimate is returned.
pub fn kummer_f(rho: f64, n: usize) -> Result<f64> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::OutOfDomain {
            what: "kummer argument must be finite and nonnegative",
            value: rho,
        });
    }
    if n == 0 {
        return Err(Error::DimensionTooSmall(n));
    }
    let x = 0.5 * rho * rho;
    if x > SERIES_ARG_MAX {
        return Ok(kummer_mc(rho, n));
    }
    let a = 0.5 * (1.0 - n as f64);
    // Neumaier-compensated sum of (a)_j x^j / ((1/2)_j j!).
    let (mut sum, mut comp) = (1.0_f64, 0.0_f64);
    let mut term = 1.0_f64;
    for j in 0..10_000 {
        let jf = j as f64;
        term *= (a + jf) * x / ((0.5 + jf) * (jf + 1.0));
        if term == 0.0 {
            return Ok((-x).exp() * (sum + comp));
        }
        let s = sum + term;
        comp += if sum.abs() >= term.abs() {
            (sum - s) + term
        } else {
            (term - s) + sum
        };
        sum = s;
        let shrinking = ((a + jf + 1.0) * x).abs() < (1.5 + jf) * (jf + 2.0);
        if shrinking && term.abs() <= 1e-17 * (sum + comp).abs() {
            return Ok((-x).exp() * (sum + comp));
        }
    }
    Err(Error::SeriesNonConvergence { rho })
}

fn kummer_mc(rho: f64, n: usize) -> f64 {
    let mut rng = rng::substream(MC_FALLBACK_SEED, "kummer");
    let chi2 = ChiSquared::new(n as f64).expect("positive degrees of freedom");
    let total: f64 = (0..MC_FALLBACK_SAMPLES)
        .map(|_| (rho * rng.sample(chi2).sqrt()).cos())
        .sum();
    total / MC_FALLBACK_SAMPLES as f64
}

/// How an inversion input outside the monotone range was handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clamp {
    None,
    /// Value at or above 1; returned 0.
    Top,
    /// Value at or below `F(rho_max)`; returned `rho_max`.
    Bottom,
}

/// `F_n` restricted to `[0, rho_max]`, where it is strictly decreasing.
#[derive(Debug, Clone)]
pub struct KummerEval {
    n: usize,
    rho_max: f64,
    floor: f64,
}

impl KummerEval {
    /// Scans `F_n` on a grid until the first non-decrease; `rho_max` is the
    /// node two steps before it, which precedes the minimum.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::DimensionTooSmall(n));
        }
        // F_n oscillates on the scale pi / sqrt(n).
        let h = (0.02 / (n as f64).sqrt()).min(0.01);
        let mut prev = 1.0;
        let mut rho_max = RHO_CAP;
        let mut i = 1usize;
        loop {
            let rho = i as f64 * h;
            if rho > RHO_CAP {
                break;
            }
            let f = kummer_f(rho, n)?;
            if f >= prev {
                rho_max = (i as f64 - 2.0).max(1.0) * h;
                break;
            }
            prev = f;
            i += 1;
        }
        let floor = kummer_f(rho_max, n)?;
        Ok(Self { n, rho_max, floor })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }

    /// `F_n(rho_max)`, the smallest invertible value.
    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn f(&self, rho: f64) -> Result<f64> {
        kummer_f(rho, self.n)
    }

    /// Unique `rho` in `[0, rho_max]` with `F_n(rho) = value`.
    pub fn inv(&self, value: f64) -> Result<f64> {
        if value == 1.0 {
            return Ok(0.0);
        }
        if value == self.floor {
            return Ok(self.rho_max);
        }
        if !(value > self.floor && value < 1.0) {
            return Err(Error::OutOfDomain {
                what: "kummer inverse needs a value in [F(rho_max), 1]",
                value,
            });
        }
        let (mut lo, mut hi) = (0.0, self.rho_max);
        while hi - lo > 1e-15 * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.f(mid)? > value {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Inverse with out-of-range values pinned to the domain ends.
    pub fn inv_clamped(&self, value: f64) -> Result<(f64, Clamp)> {
        if value >= 1.0 {
            Ok((0.0, if value > 1.0 { Clamp::Top } else { Clamp::None }))
        } else if value < self.floor {
            Ok((self.rho_max, Clamp::Bottom))
        } else {
            Ok((self.inv(value)?, Clamp::None))
        }
    }
}

pub fn kummer_inv(value: f64, n: usize) -> Result<f64> {
    KummerEval::new(n)?.inv(value)
}

/// Monte Carlo means of the projected processes on `t_k = k T / K`.
#[derive(Debug, Clone)]
pub struct ProjectedMeans {
    pub times: Vec<f64>,
    pub ez_t: Vec<f64>,
    pub ez_0: Vec<f64>,
    /// Standard errors of the two means.
    pub se_t: Vec<f64>,
    pub se_0: Vec<f64>,
}

/// Euler-Maruyama for the scalar SDEs of `a = <X_t, X_T>` and
/// `b = <X_t, X_0>` on a sphere with `dim` ambient coordinates:
///
/// ```text
/// da = [g acos(a) sqrt(1-a^2) - (dim-1) s^2/2 a] dt + s sqrt(1-a^2) dW^T
/// db = [g acos(a)/sqrt(1-a^2) (psi0 - a b) - (dim-1) s^2/2 b] dt + s sqrt(1-b^2) dW^0
/// ```
///
/// Both are projections of one tangent Brownian motion, so `dW^0` is drawn
/// with correlation `(psi0 - a b) / sqrt((1-a^2)(1-b^2))` to `dW^T`.
/// Coefficients use the left end of each step. Trajectory `j` uses stream `j`
/// of `stream` so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn simulate_projected(
    psi0: f64,
    schedule: &NoiseSchedule,
    dim: usize,
    trajectories: usize,
    steps: usize,
    noise_scale: f64,
    seed: u64,
    stream: &str,
) -> Result<ProjectedMeans> {
    if !(0.0..1.0).contains(&psi0) {
        return Err(Error::OutOfDomain {
            what: "initial projection must lie in [0, 1)",
            value: psi0,
        });
    }
    if trajectories == 0 || steps == 0 {
        return Err(Error::InvalidParameter(
            "projected simulation needs trajectories and steps".into(),
        ));
    }
    if dim < 2 {
        return Err(Error::DimensionTooSmall(dim));
    }
    let horizon = schedule.horizon;
    let dt = horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
    let mut coeffs = Vec::with_capacity(steps);
    for &t in &times[..steps] {
        let s = noise_scale * schedule.sigma(t);
        coeffs.push((schedule.gamma(t)?, s, 0.5 * (dim as f64 - 1.0) * s * s));
    }
    let lim = 1.0 - PROJ_CLAMP;
    let sqdt = dt.sqrt();

    let run_block = |block: usize| {
        // [sum a, sum a^2, sum b, sum b^2] per node.
        let mut acc = vec![[0.0f64; 4]; steps + 1];
        let start = block * BLOCK;
        for j in start..(start + BLOCK).min(trajectories) {
            let mut rng: StreamRng = rng::indexed(seed, stream, j as u64);
            let (mut a, mut b) = (psi0, 1.0_f64);
            let mut add = |k: usize, a: f64, b: f64| {
                let s = &mut acc[k];
                s[0] += a;
                s[1] += a * a;
                s[2] += b;
                s[3] += b * b;
            };
            add(0, a, b);
            for (k, &(gamma, sigma, decay)) in coeffs.iter().enumerate() {
                let sa = (1.0 - a * a).max(0.0).sqrt();
                let sb = (1.0 - b * b).max(0.0).sqrt();
                let theta = a.clamp(-1.0, 1.0).acos();
                let pull = if sa > 0.0 { theta / sa } else { 1.0 };
                let (wa, wp) = (rng::normal(&mut rng), rng::normal(&mut rng));
                let corr = if sa * sb > 0.0 {
                    ((psi0 - a * b) / (sa * sb)).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                let wb = corr * wa + (1.0 - corr * corr).sqrt() * wp;
                let na = a + (gamma * theta * sa - decay * a) * dt + sigma * sa * sqdt * wa;
                let nb = b + (gamma * pull * (psi0 - a * b) - decay * b) * dt + sigma * sb * sqdt * wb;
                a = na.clamp(-lim, lim);
                b = nb.clamp(-lim, lim);
                add(k + 1, a, b);
            }
        }
        acc
    };
    let blocks = trajectories.div_ceil(BLOCK);
    let partial: Vec<Vec<[f64; 4]>> = (0..blocks).into_par_iter().map(run_block).collect();
    let mut total = vec![[0.0f64; 4]; steps + 1];
    for block in &partial {
        for (t, p) in total.iter_mut().zip(block) {
            for i in 0..4 {
                t[i] += p[i];
            }
        }
    }
    let nf = trajectories as f64;
    let moments = |sum: f64, sq: f64| {
        let m = sum / nf;
        let var = if trajectories > 1 {
            ((sq - nf * m * m) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        (m, (var / nf).sqrt())
    };
    let mut out = ProjectedMeans {
        times,
        ez_t: Vec::with_capacity(steps + 1),
        ez_0: Vec::with_capacity(steps + 1),
        se_t: Vec::with_capacity(steps + 1),
        se_0: Vec::with_capacity(steps + 1),
    };
    for s in &total {
        let (mt, et) = moments(s[0], s[1]);
        let (m0, e0) = moments(s[2], s[3]);
        out.ez_t.push(mt);
        out.se_t.push(et);
        out.ez_0.push(m0);
        out.se_0.push(e0);
    }
    // The initial state is deterministic.
    out.ez_t[0] = psi0;
    out.ez_0[0] = 1.0;
    out.se_t[0] = 0.0;
    out.se_0[0] = 0.0;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extracted {
    pub alpha: f64,
    pub rho: f64,
    pub clamp: Clamp,
}

/// `(alpha_t, rho_t)` from the mean projections.
///
/// In the orthonormal frame `(x0, w)` of the `x0`-`xT` plane the Riemannian
/// normal has planar mean `F(rho) (cos beta, sin beta)` with `alpha = sin
/// beta`. Reading `beta` and `F(rho)` off that vector is algebraically the
/// ratio formula `alpha^2 = (r - cos phi0)^2 / (sin^2 phi0 + (r - cos phi0)^2)`,
/// `F(rho) = Ez0 / sqrt(1 - alpha^2)`, but stays finite when `Ez0 -> 0`
/// (the terminal rows of a start orthogonal to every target).
pub fn extract_params(ez_t: f64, ez_0: f64, phi0: f64, kummer: &KummerEval) -> Result<Extracted> {
    use std::f64::consts::FRAC_PI_2;
    if !(phi0 > 0.0 && phi0 <= FRAC_PI_2 + 1e-12) {
        return Err(Error::OutOfDomain {
            what: "endpoint angle must lie in (0, pi/2]",
            value: phi0,
        });
    }
    if !(ez_t.is_finite() && ez_0.is_finite()) {
        return Err(Error::OutOfDomain {
            what: "mean projections must be finite",
            value: if ez_t.is_finite() { ez_0 } else { ez_t },
        });
    }
    let (s, c) = phi0.sin_cos();
    let across = (ez_t - c * ez_0) / s;
    // F(rho) may be negative, which reverses the planar mean; keep the
    // orientation whose angle lands closest to [0, phi0].
    let outside = |b: f64| (-b).max(b - phi0).max(0.0);
    let up = across.atan2(ez_0);
    let down = (-across).atan2(-ez_0);
    let (beta, sign) = if outside(down) < outside(up) {
        (down, -1.0)
    } else {
        (up, 1.0)
    };
    let alpha = beta.clamp(0.0, phi0).sin().min(s);
    let (rho, clamp) = kummer.inv_clamped(sign * ez_0.hypot(across))?;
    Ok(Extracted { alpha, rho, clamp })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub t: f64,
    pub alpha: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub trajectories: usize,
    pub steps: usize,
    pub schedule: NoiseSchedule,
    /// Factor applied to every `rho`; 1 when not calibrated.
    pub calibration: f64,
    /// Rows whose `rho` was pinned to a domain end.
    pub clamped_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedTable {
    /// Ambient coordinates of the sphere the table serves.
    pub dim: usize,
    pub psi0: f64,
    pub rows: Vec<TableRow>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct TableConfig {
    pub trajectories: usize,
    pub steps: usize,
    pub calibrate: bool,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            trajectories: 8192,
            steps: 1024,
            calibrate: true,
        }
    }
}

/// Builds the parameter table for bridges from `u` to the vertices
/// `e_0..e_{support-1}`. Any remaining axes (the mask) are not targets.
pub fn build_table(
    u: &SpherePoint,
    support: usize,
    schedule: &NoiseSchedule,
    config: &TableConfig,
    seed: u64,
) -> Result<PrecomputedTable> {
    let dim = u.dim();
    if support == 0 || support > dim {
        return Err(Error::InvalidParameter(format!(
            "target support {support} must lie in 1..={dim}"
        )));
    }
    let coords = &u.coords()[..support];
    let (lo, hi) = coords
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if hi - lo > 1e-9 {
        return Err(Error::RadialSymmetry { min: lo, max: hi });
    }
    let psi0 = coords[0];
    let phi0 = psi0.clamp(-1.0, 1.0).acos();
    let kummer = KummerEval::new(dim - 1)?;
    let means = simulate_projected(
        psi0,
        schedule,
        dim,
        config.trajectories,
        config.steps,
        1.0,
        seed,
        "precompute/projected",
    )?;
    let mut rows = Vec::with_capacity(config.steps + 1);
    let mut clamped_rows = 0;
    rows.push(TableRow {
        t: 0.0,
        alpha: 0.0,
        rho: 0.0,
    });
    for k in 1..=config.steps {
        let e = extract_params(means.ez_t[k], means.ez_0[k], phi0, &kummer)?;
        if e.clamp != Clamp::None {
            clamped_rows += 1;
        }
        rows.push(TableRow {
            t: means.times[k],
            alpha: e.alpha,
            rho: e.rho,
        });
    }
    let calibration = if config.calibrate && dim < CALIBRATION_DIM {
        calibrate(u, schedule, &rows, &kummer, seed)?
    } else {
        1.0
    };
    if calibration != 1.0 {
        rows.iter_mut().for_each(|r| r.rho *= calibration);
    }
    Ok(PrecomputedTable {
        dim,
        psi0,
        rows,
        provenance: Provenance {
            seed,
            trajectories: config.trajectories,
            steps: config.steps,
            schedule: *schedule,
            calibration,
            clamped_rows,
        },
    })
}

/// Least-squares scale `c` so that `sqrt(1 - alpha^2) F(c rho)` matches the
/// simulated `E<X_t, X_0>` at evenly spaced interior checkpoints.
fn calibrate(
    u: &SpherePoint,
    schedule: &NoiseSchedule,
    rows: &[TableRow],
    kummer: &KummerEval,
    seed: u64,
) -> Result<f64> {
    let steps = rows.len() - 1;
    let checkpoints: Vec<usize> = (1..=CALIBRATION_CHECKPOINTS)
        .map(|j| (steps * j / (CALIBRATION_CHECKPOINTS + 1)).max(1))
        .collect();
    let grid: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let target = SpherePoint::one_hot(u.dim(), 0)?;
    let spec = bridges::BridgeSpec::new(target, *schedule);
    let sims = bridges::bridge_ensemble(
        u,
        &spec,
        &grid[..=*checkpoints.last().expect("checkpoints are non-empty")],
        &checkpoints,
        CALIBRATION_TRAJECTORIES,
        seed,
        "precompute/calibration",
    )?;
    let empirical: Vec<f64> = sims
        .iter()
        .map(|xs| xs.iter().map(|x| x.inner(u)).sum::<f64>() / xs.len() as f64)
        .collect();
    let loss = |c: f64| -> f64 {
        checkpoints
            .iter()
            .zip(&empirical)
            .map(|(&k, &m)| {
                let r = rows[k];
                let rho = (c * r.rho).min(RHO_CAP);
                let pred = (1.0 - r.alpha * r.alpha).sqrt() * kummer.f(rho).unwrap_or(f64::NAN);
                (pred - m).powi(2)
            })
            .sum()
    };
    Ok(golden_section(loss, 0.5, 2.0, 1e-6))
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

impl PrecomputedTable {
    pub fn horizon(&self) -> f64 {
        self.provenance.schedule.horizon
    }

    /// Piecewise-linear `(alpha, rho)` at `t`.
    pub fn interpolate(&self, t: f64) -> Result<(f64, f64)> {
        let last = self.rows.last().expect("tables have a first row");
        if !(t >= 0.0 && t <= last.t) {
            return Err(Error::TimeOutOfRange { t, horizon: last.t });
        }
        let i = self.rows.partition_point(|r| r.t <= t);
        if i == self.rows.len() {
            return Ok((last.alpha, last.rho));
        }
        let (l, r) = (self.rows[i - 1], self.rows[i]);
        let w = (t - l.t) / (r.t - l.t);
        Ok((l.alpha + w * (r.alpha - l.alpha), l.rho + w * (r.rho - l.rho)))
    }

    pub fn check_matches(&self, dim: usize, psi0: f64) -> Result<()> {
        if dim != self.dim {
            return Err(Error::TableMismatch(format!(
                "table serves dimension {}, got {dim}",
                self.dim
            )));
        }
        if (psi0 - self.psi0).abs() > 1e-9 {
            return Err(Error::TableMismatch(format!(
                "table built for initial projection {}, got {psi0}",
                self.psi0
            )));
        }
        Ok(())
    }

    pub const MAGIC: &'static [u8; 5] = b"RNTB1";

    /// Little-endian binary record: magic, dim, K, psi0, seed, sigma0,
    /// sigmaT, horizon, trajectories, calibration, clamped rows, then K+1
    /// rows of `(t, alpha, rho)`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let p = &self.provenance;
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&((self.rows.len() - 1) as u64).to_le_bytes())?;
        w.write_all(&self.psi0.to_le_bytes())?;
        w.write_all(&p.seed.to_le_bytes())?;
        for v in [p.schedule.sigma0, p.schedule.sigma_t, p.schedule.horizon] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(p.trajectories as u64).to_le_bytes())?;
        w.write_all(&p.calibration.to_le_bytes())?;
        w.write_all(&(p.clamped_rows as u64).to_le_bytes())?;
        for r in &self.rows {
            for v in [r.t, r.alpha, r.rho] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not a parameter table (bad magic)".into()));
        }
        let u64_ = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let f64_ = |r: &mut R| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let dim = u64_(r)? as usize;
        let steps = u64_(r)? as usize;
        if steps == 0 || steps > 1 << 28 {
            return Err(Error::Format(format!("implausible step count {steps}")));
        }
        let psi0 = f64_(r)?;
        let seed = u64_(r)?;
        let schedule = NoiseSchedule::new(f64_(r)?, f64_(r)?, f64_(r)?)?;
        let trajectories = u64_(r)? as usize;
        let calibration = f64_(r)?;
        let clamped_rows = u64_(r)? as usize;
        let mut rows = Vec::with_capacity(steps + 1);
        for _ in 0..=steps {
            rows.push(TableRow {
                t: f64_(r)?,
                alpha: f64_(r)?,
                rho: f64_(r)?,
            });
        }
        if rows.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::Format("table times are not increasing".into()));
        }
        Ok(Self {
            dim,
            psi0,
            rows,
            provenance: Provenance {
                seed,
                trajectories,
                steps,
                schedule,
                calibration,
                clamped_rows,
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "t,alpha,rho")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.t, r.alpha, r.rho)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn kummer_at_zero_is_one() {
        for n in [1, 2, 3, 17, 257] {
            assert_eq!(kummer_f(0.0, n).unwrap(), 1.0);
        }
    }

    #[test]
    fn kummer_d1_is_gaussian_characteristic_function() {
        for i in 0..=1000 {
            let rho = 10.0 * i as f64 / 1000.0;
            let f = kummer_f(rho, 1).unwrap();
            assert!((f - (-0.5 * rho * rho).exp()).abs() < 1e-9, "{rho}");
        }
    }

    /// In three dimensions `E cos(rho |z|) = (1 - rho^2) e^{-rho^2/2}`.
    #[test]
    fn kummer_d3_closed_form() {
        for i in 0..=500 {
            let rho = 5.0 * i as f64 / 500.0;
            let exact = (1.0 - rho * rho) * (-0.5 * rho * rho).exp();
            assert!((kummer_f(rho, 3).unwrap() - exact).abs() < 1e-12, "{rho}");
        }
    }

    #[test]
    fn kummer_rejects_negative() {
        assert!(kummer_f(-0.1, 3).is_err());
        assert!(kummer_f(f64::NAN, 3).is_err());
    }

    #[test]
    fn kummer_large_argument_falls_back_to_monte_carlo() {
        let f = kummer_f(11.0, 1).unwrap();
        assert!((f - (-60.5f64).exp()).abs() < 0.01);
    }

    #[test]
    fn monotone_domain_is_strictly_decreasing() {
        for n in [1, 2, 3, 4, 17, 64, 257] {
            let k = KummerEval::new(n).unwrap();
            let mut prev = f64::INFINITY;
            for i in 0..=2000 {
                let f = k.f(k.rho_max() * i as f64 / 2000.0).unwrap();
                assert!(f < prev, "n = {n}");
                prev = f;
            }
        }
        // F_3 has its minimum at sqrt(3).
        let k3 = KummerEval::new(3).unwrap();
        assert!(k3.rho_max() < 3f64.sqrt() && k3.rho_max() > 3f64.sqrt() - 0.03);
        assert_eq!(KummerEval::new(1).unwrap().rho_max(), RHO_CAP);
    }

    #[test]
    fn inverse_round_trip() {
        for n in [1, 3, 17, 257] {
            let k = KummerEval::new(n).unwrap();
            assert_eq!(k.inv(1.0).unwrap(), 0.0);
            assert_eq!(k.inv(k.floor()).unwrap(), k.rho_max());
            for i in 1..1000 {
                let rho = k.rho_max() * i as f64 / 1000.0;
                let back = k.inv(k.f(rho).unwrap()).unwrap();
                assert!((back - rho).abs() < 1e-8, "n = {n}, rho = {rho}, back = {back}");
            }
        }
    }

    #[test]
    fn inverse_clamps_out_of_range() {
        let k = KummerEval::new(4).unwrap();
        assert_eq!(k.inv_clamped(1.0 + 1e-6).unwrap(), (0.0, Clamp::Top));
        let (rho, c) = k.inv_clamped(k.floor() - 0.1).unwrap();
        assert_eq!((rho, c), (k.rho_max(), Clamp::Bottom));
        assert!(k.inv(1.5).is_err());
        assert!(k.inv(k.floor() - 0.1).is_err());
    }

    #[test]
    fn projected_initial_state_is_exact() {
        let s = NoiseSchedule::default();
        let m = simulate_projected(0.3, &s, 4, 64, 16, 1.0, 0, "p").unwrap();
        assert_eq!((m.ez_t[0], m.ez_0[0]), (0.3, 1.0));
        assert_eq!(m.times.len(), 17);
        assert!(simulate_projected(1.0, &s, 4, 64, 16, 1.0, 0, "p").is_err());
    }

    /// Without noise `theta = acos z^T` solves `theta' = -gamma theta`, so
    /// `theta(t) = theta0 exp(-int_0^t gamma)`. Checked against RK4 on the
    /// scalar ODE and against the closed form.
    #[test]
    fn noiseless_projection_matches_ode() {
        let s = NoiseSchedule::default();
        let steps = 20_000;
        let m = simulate_projected(0.2, &s, 5, 1, steps, 0.0, 0, "ode").unwrap();
        let rhs = |t: f64, z: f64| s.gamma(t).unwrap() * z.acos() * (1.0 - z * z).sqrt();
        let (mut z, dt) = (0.2f64, 1.0 / steps as f64);
        for k in 0..steps / 2 {
            let t = k as f64 * dt;
            let k1 = rhs(t, z);
            let k2 = rhs(t + dt / 2.0, z + dt / 2.0 * k1);
            let k3 = rhs(t + dt / 2.0, z + dt / 2.0 * k2);
            let k4 = rhs(t + dt, z + dt * k3);
            z += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            let exact = (0.2f64.acos() * (-s.integrated_gamma(0.0, t + dt)).exp()).cos();
            assert!((z - exact).abs() < 1e-9);
            assert!((m.ez_t[k + 1] - z).abs() < 1e-4, "t = {}", t + dt);
        }
    }

    #[test]
    fn projected_is_reproducible() {
        let s = NoiseSchedule::default();
        let a = simulate_projected(0.0, &s, 4, 600, 32, 1.0, 9, "p").unwrap();
        let b = simulate_projected(0.0, &s, 4, 600, 32, 1.0, 9, "p").unwrap();
        assert_eq!(a.ez_t, b.ez_t);
        assert_eq!(a.ez_0, b.ez_0);
    }

    #[test]
    fn extract_at_start_is_zero() {
        let k = KummerEval::new(3).unwrap();
        for phi0 in [0.3, 1.0, FRAC_PI_2] {
            let e = extract_params(phi0.cos(), 1.0, phi0, &k).unwrap();
            assert!(e.alpha.abs() < 1e-12);
            assert!(e.rho < 1e-3);
        }
    }

    #[test]
    fn extract_terminal_limit_gives_sin_phi0() {
        let k = KummerEval::new(3).unwrap();
        for phi0 in [0.3, 1.0, FRAC_PI_2] {
            let e = extract_params(1.0, phi0.cos(), phi0, &k).unwrap();
            assert!((e.alpha - phi0.sin()).abs() < 1e-6, "{phi0}");
        }
    }

    #[test]
    fn extract_inverts_the_mean_identities() {
        let kummer = KummerEval::new(5).unwrap();
        for phi0 in [0.4, 1.1, FRAC_PI_2] {
            let (s, c) = phi0.sin_cos();
            for &alpha in &[0.05, 0.3, 0.9 * s] {
                for &rho in &[0.1, 0.5, 0.9 * kummer.rho_max()] {
                    let f = kummer.f(rho).unwrap();
                    let beta = f64::asin(alpha);
                    let ez0 = f * beta.cos();
                    let ezt = f * (c * beta.cos() + s * beta.sin());
                    let e = extract_params(ezt, ez0, phi0, &kummer).unwrap();
                    assert!((e.alpha - alpha).abs() < 1e-9, "{phi0} {alpha} {rho} {e:?}");
                    assert!((e.rho - rho).abs() < 1e-7);
                    // The ratio form of the same map.
                    let r = ezt / ez0;
                    let ratio_alpha = ((r - c).powi(2) / (s * s + (r - c).powi(2))).sqrt();
                    assert!((ratio_alpha - alpha).abs() < 1e-9);
                }
            }
        }
    }

    fn small_table(seed: u64) -> PrecomputedTable {
        let u = SpherePoint::one_hot(5, 4).unwrap();
        let cfg = TableConfig {
            trajectories: 512,
            steps: 64,
            calibrate: true,
        };
        build_table(&u, 4, &NoiseSchedule::default(), &cfg, seed).unwrap()
    }

    #[test]
    fn table_invariants() {
        let t = small_table(3);
        assert_eq!(
            t.rows[0],
            TableRow {
                t: 0.0,
                alpha: 0.0,
                rho: 0.0
            }
        );
        assert_eq!(t.psi0, 0.0);
        assert!(t.rows.windows(2).all(|w| w[1].t > w[0].t));
        for r in &t.rows {
            assert!(r.alpha >= 0.0 && r.alpha <= 1.0 && r.rho >= 0.0);
        }
        let c = t.provenance.calibration;
        assert!(c > 0.5 && c < 2.0, "{c}");
    }

    #[test]
    fn table_is_deterministic() {
        assert_eq!(small_table(5).to_bytes(), small_table(5).to_bytes());
        assert_ne!(small_table(5).to_bytes(), small_table(6).to_bytes());
    }

    #[test]
    fn table_rejects_asymmetric_start() {
        let u = SpherePoint::new(vec![0.5, 0.1, 0.1, 0.8]).unwrap();
        let err = build_table(&u, 3, &NoiseSchedule::default(), &TableConfig::default(), 0);
        assert!(matches!(err, Err(Error::RadialSymmetry { .. })));
    }

    #[test]
    fn binary_round_trip() {
        let t = small_table(1);
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..5], b"RNTB1");
        let back = PrecomputedTable::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PrecomputedTable::read_from(&mut bad.as_slice()).is_err());
        assert!(PrecomputedTable::read_from(&mut &bytes[..40]).is_err());
    }

    #[test]
    fn csv_export() {
        let t = small_table(1);
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("t,alpha,rho"));
        assert_eq!(text.lines().count(), t.rows.len() + 1);
    }

    #[test]
    fn interpolation_rules() {
        let t = small_table(2);
        for r in &t.rows {
            assert_eq!(t.interpolate(r.t).unwrap(), (r.alpha, r.rho));
        }
        for w in t.rows.windows(2) {
            let (a, r) = t.interpolate(0.5 * (w[0].t + w[1].t)).unwrap();
            assert!((a - 0.5 * (w[0].alpha + w[1].alpha)).abs() < 1e-15);
            assert!((r - 0.5 * (w[0].rho + w[1].rho)).abs() < 1e-15);
            if w[1].alpha >= w[0].alpha {
                let mut prev = w[0].alpha;
                for i in 1..=10 {
                    let (a, _) = t.interpolate(w[0].t + (w[1].t - w[0].t) * i as f64 / 10.0).unwrap();
                    assert!(a >= prev - 1e-15);
                    prev = a;
                }
            }
        }
        assert!(t.interpolate(-0.1).is_err());
        assert!(t.interpolate(1.1).is_err());
    }

    #[test]
    fn table_mismatch_is_reported() {
        let t = small_table(1);
        assert!(t.check_matches(5, 0.0).is_ok());
        assert!(t.check_matches(6, 0.0).is_err());
        assert!(t.check_matches(5, 0.5).is_err());
    }
}
