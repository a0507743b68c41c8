//! Noise schedule, flow schedules, the constant mixing weight and the
//! importance-sampling proposal over time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometric interpolation `sigma_t = sigma_0^{(T-t)/T} sigma_T^{t/T}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma0: f64,
    #[serde(rename = "sigmaT")]
    pub sigma_t: f64,
    pub horizon: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma0: 0.1,
            sigma_t: 1.0,
            horizon: 1.0,
        }
    }
}

impl NoiseSchedule {
    /// Any positive pair is accepted here: constant and decreasing schedules
    /// are needed as references. Run configs additionally go through
    /// [`NoiseSchedule::check_gradual`].
    pub fn new(sigma0: f64, sigma_t: f64, horizon: f64) -> Result<Self> {
        for (name, v) in [("sigma0", sigma0), ("sigmaT", sigma_t), ("horizon", horizon)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            sigma0,
            sigma_t,
            horizon,
        })
    }

    pub fn constant(sigma: f64, horizon: f64) -> Result<Self> {
        Self::new(sigma, sigma, horizon)
    }

    /// Rejects schedules whose noise decreases over time.
    pub fn check_gradual(&self) -> Result<()> {
        if self.sigma0 > self.sigma_t {
            return Err(Error::InvalidParameter(format!(
                "sigma0 ({}) must not exceed sigmaT ({})",
                self.sigma0, self.sigma_t
            )));
        }
        Ok(())
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_t / self.sigma0).ln()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        let s = (t / self.horizon).clamp(0.0, 1.0);
        (self.sigma0.ln() * (1.0 - s) + self.sigma_t.ln() * s).exp()
    }

    /// `int_t^T sigma_s^2 ds` in closed form.
    pub fn remaining_variance(&self, t: f64) -> f64 {
        let lr = self.log_ratio();
        if lr.abs() < 1e-12 {
            self.sigma0 * self.sigma0 * (self.horizon - t)
        } else {
            let st = self.sigma(t);
            (self.sigma_t * self.sigma_t - st * st) * self.horizon / (2.0 * lr)
        }
    }

    /// Time-change coefficient `sigma_t^2 / int_t^T sigma_s^2 ds`.
    pub fn gamma(&self, t: f64) -> Result<f64> {
        if !(0.0..self.horizon).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        let s = self.sigma(t);
        Ok(s * s / self.remaining_variance(t))
    }

    /// `int_a^b gamma_s ds = ln(V(a) / V(b))` with `V` the remaining variance.
    pub fn integrated_gamma(&self, a: f64, b: f64) -> f64 {
        (self.remaining_variance(a) / self.remaining_variance(b)).ln()
    }
}

/// Noise-schedule family feeding the flow schedules. Only the linear
/// `alpha_t = 1 - t/T` is built in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearAlpha {
    pub horizon: f64,
}

impl LinearAlpha {
    pub fn alpha(&self, t: f64) -> f64 {
        (1.0 - t / self.horizon).clamp(0.0, 1.0)
    }

    pub fn dalpha_dt(&self) -> f64 {
        -1.0 / self.horizon
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfDomain {
            what: "alpha must lie in [0, 1]",
            value: alpha,
        });
    }
    Ok(())
}

/// Flow schedule that reproduces masked (absorbing) discrete diffusion.
pub fn kappa_masked(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(std::f64::consts::FRAC_2_PI * alpha.sqrt().asin())
}

/// d kappa_masked / d alpha.
pub fn dkappa_masked(alpha: f64) -> f64 {
    std::f64::consts::FRAC_1_PI / (alpha * (1.0 - alpha)).sqrt()
}

/// Angle between a vertex and the barycenter of the d-simplex on the sphere.
pub fn barycenter_angle(d: usize) -> f64 {
    (1.0 / (d as f64).sqrt()).acos()
}

/// Flow schedule that reproduces uniform discrete diffusion over d classes.
pub fn kappa_uniform(alpha: f64, d: usize) -> Result<f64> {
    check_alpha(alpha)?;
    let theta0 = barycenter_angle(d);
    Ok(1.0 - ((1.0 - alpha).sqrt() * theta0.sin()).asin() / theta0)
}

/// d kappa_uniform / d alpha.
pub fn dkappa_uniform(alpha: f64, d: usize) -> f64 {
    let theta0 = barycenter_angle(d);
    let s = theta0.sin();
    let rest = 1.0 - alpha;
    s / (2.0 * theta0 * rest.sqrt() * (1.0 - rest * s * s).sqrt())
}

/// Constant mixing weight between the masked and uniform paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSchedule {
    pub lambda: f64,
}

impl MixSchedule {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::OutOfDomain {
                what: "mixing weight lambda must lie in [0, 1]",
                value: lambda,
            });
        }
        Ok(Self { lambda })
    }
}

/// Time proposal: uniform background of weight `epsilon` plus a plateau
/// on `[a, b]`, normalized over `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeProposal {
    pub epsilon: f64,
    pub a: f64,
    pub b: f64,
    pub horizon: f64,
}

impl TimeProposal {
    pub fn new(epsilon: f64, a: f64, b: f64, horizon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "proposal epsilon must lie in (0, 0.5), got {epsilon}"
            )));
        }
        if !(0.0 <= a && a < b && b <= horizon) {
            return Err(Error::InvalidParameter(format!(
                "proposal interval [{a}, {b}] must satisfy 0 <= a < b <= {horizon}"
            )));
        }
        Ok(Self { epsilon, a, b, horizon })
    }

    /// Defaults `epsilon = 0.05`, plateau `[0.2, 0.8] T`.
    pub fn default_for(horizon: f64) -> Self {
        Self {
            epsilon: 0.05,
            a: 0.2 * horizon,
            b: 0.8 * horizon,
            horizon,
        }
    }

    /// Plateau over the whole horizon, i.e. the uniform density.
    pub fn uniform(horizon: f64) -> Self {
        Self {
            epsilon: 0.05,
            a: 0.0,
            b: horizon,
            horizon,
        }
    }

    fn normalizer(&self) -> f64 {
        self.epsilon * self.horizon + 1.0 - 2.0 * self.epsilon
    }

    /// Probability of the uniform background component.
    fn background_mass(&self) -> f64 {
        self.epsilon * self.horizon / self.normalizer()
    }

    pub fn density(&self, t: f64) -> f64 {
        if !(0.0..=self.horizon).contains(&t) {
            return 0.0;
        }
        let plateau = if (self.a..=self.b).contains(&t) {
            (1.0 - 2.0 * self.epsilon) / (self.b - self.a)
        } else {
            0.0
        };
        (self.epsilon + plateau) / self.normalizer()
    }

    /// Smallest value the density takes on `[0, T]`.
    pub fn density_floor(&self) -> f64 {
        self.epsilon / self.normalizer()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let pick: f64 = rng.random();
        let u: f64 = rng.random();
        if pick < self.background_mass() {
            u * self.horizon
        } else {
            self.a + u * (self.b - self.a)
        }
    }
}
