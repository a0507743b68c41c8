//! Logarithm bridges, their diffusion mixture, and the geodesic random walk
//! that simulates both.
//!
//! A bridge toward `x1` has drift `gamma_t log_x(x1)` and diffusion
//! `sigma_t dB_t` (Brownian motion on the sphere). Because `gamma_t` blows up
//! at the horizon, simulations stop at `T - delta`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{self, SimplexPoint, SpherePoint, TangentVector, INNER_CLAMP};
use crate::rng::{self, StreamRng};
use crate::schedules::NoiseSchedule;

/// Guard keeping the radial process away from the poles of `cot`.
pub const RADIAL_GUARD: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BridgeSpec {
    pub target: SpherePoint,
    pub schedule: NoiseSchedule,
    /// Multiplies the diffusion coefficient; 0 gives the deterministic flow.
    pub noise_scale: f64,
}

impl BridgeSpec {
    pub fn new(target: SpherePoint, schedule: NoiseSchedule) -> Self {
        Self {
            target,
            schedule,
            noise_scale: 1.0,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.noise_scale = 0.0;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Path {
    pub times: Vec<f64>,
    pub states: Vec<SpherePoint>,
}

impl Path {
    pub fn last(&self) -> &SpherePoint {
        self.states.last().expect("paths hold at least the initial state")
    }
}

/// `log_x(e_k)` scale: returns `(theta / sin theta, theta)` for `c = x_k`.
#[inline]
pub(crate) fn vertex_log_factor(c: f64) -> Result<(f64, f64)> {
    if c <= -1.0 + INNER_CLAMP {
        return Err(Error::AntipodalPoints { inner: c });
    }
    let s = ((1.0 - c) * (1.0 + c)).max(0.0).sqrt();
    Ok(geometry::log_factor(c, s))
}

/// `gamma log_x(target)` into `out`.
pub fn bridge_drift_raw(x: &[f64], target: &[f64], gamma: f64, out: &mut [f64]) -> Result<()> {
    geometry::log_map_raw(x, target, out)?;
    out.iter_mut().for_each(|v| *v *= gamma);
    Ok(())
}

/// Mixture drift toward the vertices, `gamma sum_k p_k log_x(e_k)`, in O(d).
///
/// `probs[k]` weights vertex `e_k`; zero entries are skipped so the mask axis
/// never contributes.
pub fn vertex_mixture_drift_raw(x: &[f64], probs: &[f64], gamma: f64, out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(x.len(), probs.len());
    // log_x(e_k) = f_k (e_k - x_k x) with f_k = theta_k / sin theta_k.
    let mut along_x = 0.0;
    for (k, (&p, &c)) in probs.iter().zip(x).enumerate() {
        if p == 0.0 {
            out[k] = 0.0;
            continue;
        }
        let (f, _) = vertex_log_factor(c)?;
        out[k] = p * f;
        along_x += p * f * c;
    }
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = gamma * (*o - along_x * xi);
    }
    // The vertex sum is tangent analytically; remove rounding residue.
    geometry::project_raw(x, out);
    Ok(())
}

/// Bridge drift `gamma_t log_x(target)`.
pub fn bridge_drift(x: &SpherePoint, spec: &BridgeSpec, t: f64) -> Result<TangentVector> {
    let gamma = spec.schedule.gamma(t)?;
    Ok(geometry::log_map(x, &spec.target)?.scaled(gamma))
}

/// Drift of the diffusion mixture over the vertices `e_k`.
pub fn mixture_drift(x: &SpherePoint, probs: &SimplexPoint, t: f64, schedule: &NoiseSchedule) -> Result<TangentVector> {
    if probs.dim() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: probs.dim(),
        });
    }
    let gamma = schedule.gamma(t)?;
    let mut out = vec![0.0; x.dim()];
    vertex_mixture_drift_raw(x.coords(), probs.probs(), gamma, &mut out)?;
    Ok(TangentVector::from_parts(x.clone(), out))
}

/// Drift of the mixture over arbitrary endpoints.
pub fn mixture_drift_over(
    x: &SpherePoint,
    targets: &[SpherePoint],
    probs: &SimplexPoint,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<TangentVector> {
    if targets.len() != probs.dim() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            got: probs.dim(),
        });
    }
    let gamma = schedule.gamma(t)?;
    let mut out = vec![0.0; x.dim()];
    let mut tmp = vec![0.0; x.dim()];
    for (target, &p) in targets.iter().zip(probs.probs()) {
        if p == 0.0 {
            continue;
        }
        geometry::log_map_raw(x.coords(), target.coords(), &mut tmp)?;
        out.iter_mut().zip(&tmp).for_each(|(o, v)| *o += p * gamma * v);
    }
    Ok(TangentVector::from_parts(x.clone(), out))
}

/// One geodesic-random-walk step in place:
/// `x <- exp_x(drift dt + sigma sqrt(dt) P_x w)`, `w` standard normal.
///
/// `scratch` must have the length of `x`; `drift` is re-projected onto the
/// tangent space first.
pub fn step_grw_raw<R: Rng + ?Sized>(
    x: &mut [f64],
    drift: &[f64],
    sigma: f64,
    dt: f64,
    rng: &mut R,
    scratch: &mut [f64],
) {
    let noise = sigma * dt.sqrt();
    if noise > 0.0 {
        rng::fill_normal(rng, scratch);
        for (s, v) in scratch.iter_mut().zip(drift) {
            *s = v * dt + noise * *s;
        }
    } else {
        for (s, v) in scratch.iter_mut().zip(drift) {
            *s = v * dt;
        }
    }
    geometry::project_raw(x, scratch);
    let base = x.to_vec();
    geometry::exp_map_raw(&base, scratch, x);
}

pub fn step_grw<R: Rng + ?Sized>(
    x: &SpherePoint,
    drift: &TangentVector,
    sigma_t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<SpherePoint> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {dt}")));
    }
    if drift.vec().len() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: drift.vec().len(),
        });
    }
    let mut state = x.coords().to_vec();
    let mut scratch = vec![0.0; x.dim()];
    step_grw_raw(&mut state, drift.vec(), sigma_t, dt, rng, &mut scratch);
    Ok(SpherePoint::from_unit(state))
}

/// Uniform grid `t_i = i (T - delta) / M`, `i = 0..=M`.
pub fn time_grid(horizon: f64, stop_delta: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidParameter("need at least one step".into()));
    }
    if !(stop_delta > 0.0 && stop_delta < horizon) {
        return Err(Error::InvalidParameter(format!(
            "stop delta must lie in (0, {horizon}), got {stop_delta}"
        )));
    }
    let end = horizon - stop_delta;
    Ok((0..=steps).map(|i| end * i as f64 / steps as f64).collect())
}

/// Euler-Maruyama geodesic random walk of a bridge over `grid`, calling
/// `observe(i, t_i, x_i)` at every node including the initial one.
///
/// Coefficients are evaluated at the left end of each interval.
pub fn run_bridge<R, F>(
    x0: &[f64],
    target: &[f64],
    schedule: &NoiseSchedule,
    noise_scale: f64,
    grid: &[f64],
    rng: &mut R,
    mut observe: F,
) -> Result<()>
where
    R: Rng + ?Sized,
    F: FnMut(usize, f64, &[f64]),
{
    let mut x = x0.to_vec();
    let mut drift = vec![0.0; x.len()];
    let mut scratch = vec![0.0; x.len()];
    observe(0, grid[0], &x);
    for (i, w) in grid.windows(2).enumerate() {
        let (t, dt) = (w[0], w[1] - w[0]);
        let gamma = schedule.gamma(t)?;
        bridge_drift_raw(&x, target, gamma, &mut drift)?;
        let sigma = noise_scale * schedule.sigma(t);
        step_grw_raw(&mut x, &drift, sigma, dt, rng, &mut scratch);
        observe(i + 1, w[1], &x);
    }
    Ok(())
}

/// Full trajectory of a bridge from `x0`, stopped at `T - stop_delta`.
pub fn simulate_bridge<R: Rng + ?Sized>(
    x0: &SpherePoint,
    spec: &BridgeSpec,
    steps: usize,
    stop_delta: f64,
    rng: &mut R,
) -> Result<Path> {
    if x0.dim() != spec.target.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.target.dim(),
            got: x0.dim(),
        });
    }
    let times = time_grid(spec.schedule.horizon, stop_delta, steps)?;
    let mut states = Vec::with_capacity(times.len());
    run_bridge(
        x0.coords(),
        spec.target.coords(),
        &spec.schedule,
        spec.noise_scale,
        &times,
        rng,
        |i, _, x| {
            states.push(if i == 0 {
                x0.clone()
            } else {
                SpherePoint::from_unit(x.to_vec())
            })
        },
    )?;
    Ok(Path { times, states })
}

/// States of `n` independent bridge trajectories at the grid indices in
/// `checkpoints`: `out[c][j]` is trajectory `j` at checkpoint `c`.
///
/// Trajectory `j` draws from stream `j` of the named substream, so the result
/// does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn bridge_ensemble(
    x0: &SpherePoint,
    spec: &BridgeSpec,
    grid: &[f64],
    checkpoints: &[usize],
    n: usize,
    seed: u64,
    stream: &str,
) -> Result<Vec<Vec<SpherePoint>>> {
    let per_traj: Vec<Vec<SpherePoint>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng: StreamRng = rng::indexed(seed, stream, j as u64);
            let mut keep = Vec::with_capacity(checkpoints.len());
            run_bridge(
                x0.coords(),
                spec.target.coords(),
                &spec.schedule,
                spec.noise_scale,
                grid,
                &mut rng,
                |i, _, x| {
                    if checkpoints.contains(&i) {
                        keep.push(SpherePoint::from_unit(x.to_vec()));
                    }
                },
            )?;
            Ok(keep)
        })
        .collect::<Result<_>>()?;
    Ok((0..checkpoints.len())
        .map(|c| per_traj.iter().map(|traj| traj[c].clone()).collect())
        .collect())
}

/// Euler-Maruyama for the geodesic distance to the target,
/// `dr = [-gamma_t r + (n - 1) sigma_t^2 / 2 cot r] dt + sigma_t dW` with
/// `n = d - 1` the intrinsic dimension of `S^{d-1}`, reflected into
/// `(guard, pi - guard)`. Returns `r` at every node of `grid`.
pub fn simulate_radial<R: Rng + ?Sized>(
    r0: f64,
    schedule: &NoiseSchedule,
    d: usize,
    noise_scale: f64,
    grid: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    use std::f64::consts::PI;
    if !(r0 > 0.0 && r0 < PI) {
        return Err(Error::OutOfDomain {
            what: "initial radius must lie in (0, pi)",
            value: r0,
        });
    }
    let curvature = (d as f64 - 2.0) / 2.0;
    let (lo, hi) = (RADIAL_GUARD, PI - RADIAL_GUARD);
    let mut r = r0;
    let mut out = Vec::with_capacity(grid.len());
    out.push(r);
    for w in grid.windows(2) {
        let (t, dt) = (w[0], w[1] - w[0]);
        let gamma = schedule.gamma(t)?;
        let sigma = noise_scale * schedule.sigma(t);
        let drift = -gamma * r + curvature * sigma * sigma / r.tan();
        let dw = if sigma > 0.0 { rng::normal(rng) * dt.sqrt() } else { 0.0 };
        r += drift * dt + sigma * dw;
        if r < lo {
            r = 2.0 * lo - r;
        }
        if r > hi {
            r = 2.0 * hi - r;
        }
        r = r.clamp(lo, hi);
        out.push(r);
    }
    Ok(out)
}
