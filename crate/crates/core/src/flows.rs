//! Deterministic slerp flows on the sphere and the two schedules under which
//! their simplex image is exactly the marginal of masked or uniform discrete
//! diffusion.

use crate::error::{Error, Result};
use crate::geometry::{self, SimplexPoint, SpherePoint, TangentVector};
use crate::schedules::{self, LinearAlpha};

/// Step used for `d log kappa / dt` when a schedule has no analytic form.
pub const FD_STEP: f64 = 1e-6;

/// Angle schedule `kappa: [0, T] -> [0, 1]` with `kappa_0 = 1`, `kappa_T = 0`.
pub trait FlowSchedule {
    fn horizon(&self) -> f64;

    fn kappa(&self, t: f64) -> f64;

    /// `d log kappa / dt`; centered differences unless overridden.
    fn dlog_kappa(&self, t: f64) -> f64 {
        let lo = (t - FD_STEP).max(0.0);
        let hi = (t + FD_STEP).min(self.horizon());
        (self.kappa(hi).ln() - self.kappa(lo).ln()) / (hi - lo)
    }
}

impl<F: Fn(f64) -> f64> FlowSchedule for (F, f64) {
    fn horizon(&self) -> f64 {
        self.1
    }

    fn kappa(&self, t: f64) -> f64 {
        (self.0)(t)
    }
}

/// Schedule realizing masked diffusion for `alpha_t = 1 - t/T`.
#[derive(Debug, Clone, Copy)]
pub struct MaskedKappa {
    pub alpha: LinearAlpha,
}

impl FlowSchedule for MaskedKappa {
    fn horizon(&self) -> f64 {
        self.alpha.horizon
    }

    fn kappa(&self, t: f64) -> f64 {
        schedules::kappa_masked(self.alpha.alpha(t)).unwrap_or(0.0)
    }

    fn dlog_kappa(&self, t: f64) -> f64 {
        let a = self.alpha.alpha(t);
        schedules::dkappa_masked(a) * self.alpha.dalpha_dt() / self.kappa(t)
    }
}

/// Schedule realizing uniform diffusion over `d` classes for `alpha_t = 1 - t/T`.
#[derive(Debug, Clone, Copy)]
pub struct UniformKappa {
    pub alpha: LinearAlpha,
    pub d: usize,
}

impl FlowSchedule for UniformKappa {
    fn horizon(&self) -> f64 {
        self.alpha.horizon
    }

    fn kappa(&self, t: f64) -> f64 {
        schedules::kappa_uniform(self.alpha.alpha(t), self.d).unwrap_or(0.0)
    }

    fn dlog_kappa(&self, t: f64) -> f64 {
        let a = self.alpha.alpha(t);
        schedules::dkappa_uniform(a, self.d) * self.alpha.dalpha_dt() / self.kappa(t)
    }
}

/// Geodesic flow from `y0` (at `kappa = 1`) to `y1` (at `kappa = 0`).
#[derive(Debug, Clone)]
pub struct FlowSpec<S> {
    y0: SpherePoint,
    y1: SpherePoint,
    schedule: S,
    theta0: f64,
}

impl<S: FlowSchedule> FlowSpec<S> {
    pub fn new(y0: SpherePoint, y1: SpherePoint, schedule: S) -> Result<Self> {
        if y0.dim() != y1.dim() {
            return Err(Error::DimensionMismatch {
                expected: y0.dim(),
                got: y1.dim(),
            });
        }
        let theta0 = geometry::geodesic_distance(&y0, &y1);
        if !(1e-12..=std::f64::consts::PI - 1e-12).contains(&theta0) {
            return Err(Error::DegenerateGeodesic);
        }
        Ok(Self {
            y0,
            y1,
            schedule,
            theta0,
        })
    }

    pub fn y0(&self) -> &SpherePoint {
        &self.y0
    }

    pub fn y1(&self) -> &SpherePoint {
        &self.y1
    }

    pub fn schedule(&self) -> &S {
        &self.schedule
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }
}

/// Point of the flow at time `t`:
/// `sin(theta0 - theta_t)/sin(theta0) y1 + sin(theta_t)/sin(theta0) y0`.
pub fn slerp_point<S: FlowSchedule>(spec: &FlowSpec<S>, t: f64) -> Result<SpherePoint> {
    let horizon = spec.schedule.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    let theta_t = spec.schedule.kappa(t) * spec.theta0;
    let s0 = spec.theta0.sin();
    let w1 = (spec.theta0 - theta_t).sin() / s0;
    let w0 = theta_t.sin() / s0;
    let coords = spec
        .y0
        .coords()
        .iter()
        .zip(spec.y1.coords())
        .map(|(a, b)| w0 * a + w1 * b)
        .collect();
    Ok(SpherePoint::from_unit(coords))
}

/// Velocity of the flow ODE, `-(d log kappa / dt) log_y(y1)`.
pub fn flow_ode_rhs<S: FlowSchedule>(y: &SpherePoint, spec: &FlowSpec<S>, t: f64) -> Result<TangentVector> {
    if spec.schedule.kappa(t) <= 0.0 {
        return Err(Error::OutOfDomain {
            what: "kappa vanishes, d log kappa / dt is undefined",
            value: t,
        });
    }
    let rate = spec.schedule.dlog_kappa(t);
    Ok(geometry::log_map(y, &spec.y1)?.scaled(-rate))
}

/// `alpha e_k + (1 - alpha) e_m` on the simplex augmented with a final mask axis.
pub fn masked_flow_simplex(k: usize, alpha: f64, d: usize) -> Result<SimplexPoint> {
    if k >= d {
        return Err(Error::TokenOutOfRange { token: k, vocab: d });
    }
    schedules::kappa_masked(alpha)?;
    let mut probs = vec![0.0; d + 1];
    probs[k] = alpha;
    probs[d] = 1.0 - alpha;
    SimplexPoint::new(probs)
}

/// `sum_{i != k} (1 - alpha)/d e_i + (1 + (d - 1) alpha)/d e_k`.
pub fn uniform_flow_simplex(k: usize, alpha: f64, d: usize) -> Result<SimplexPoint> {
    if k >= d {
        return Err(Error::TokenOutOfRange { token: k, vocab: d });
    }
    schedules::kappa_uniform(alpha, d)?;
    let n = d as f64;
    let mut probs = vec![(1.0 - alpha) / n; d];
    probs[k] = (1.0 + (n - 1.0) * alpha) / n;
    SimplexPoint::new(probs)
}

/// Masked flow from `e_k` to the mask vertex (last axis of a `d + 1` sphere).
pub fn masked_flow(k: usize, d: usize, horizon: f64) -> Result<FlowSpec<MaskedKappa>> {
    FlowSpec::new(
        SpherePoint::one_hot(d + 1, k)?,
        SpherePoint::one_hot(d + 1, d)?,
        MaskedKappa {
            alpha: LinearAlpha { horizon },
        },
    )
}

/// Uniform flow from `e_k` to the barycenter.
pub fn uniform_flow(k: usize, d: usize, horizon: f64) -> Result<FlowSpec<UniformKappa>> {
    FlowSpec::new(
        SpherePoint::one_hot(d, k)?,
        SpherePoint::barycenter(d, d)?,
        UniformKappa {
            alpha: LinearAlpha { horizon },
            d,
        },
    )
}
