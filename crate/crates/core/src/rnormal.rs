//! Riemannian-normal surrogate for bridge marginals, and the MMD statistic
//! used to check it against simulation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, SpherePoint, INNER_CLAMP};
use crate::precompute::PrecomputedTable;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RNormalParams {
    pub mu: SpherePoint,
    pub rho: f64,
}

impl RNormalParams {
    pub fn new(mu: SpherePoint, rho: f64) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::OutOfDomain {
                what: "tangent spread must be finite and nonnegative",
                value: rho,
            });
        }
        Ok(Self { mu, rho })
    }
}

/// Coefficients `(on_x0, on_xt)` of the mean `mu` for `<x0, xT> = cos phi0`.
///
/// `mu = (alpha / sin phi0) xT + (sqrt(1 - alpha^2) - alpha cos phi0 / sin phi0) x0`.
pub fn mean_coefficients(cos_phi0: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(cos_phi0.abs() < 1.0 - INNER_CLAMP) {
        return Err(Error::DegenerateGeodesic);
    }
    let sin_phi0 = (1.0 - cos_phi0 * cos_phi0).sqrt();
    if !(alpha >= 0.0 && alpha <= sin_phi0 + 1e-12) {
        return Err(Error::OutOfDomain {
            what: "alpha must lie in [0, sin phi0]",
            value: alpha,
        });
    }
    let on_xt = alpha / sin_phi0;
    let on_x0 = (1.0 - alpha * alpha).max(0.0).sqrt() - alpha * cos_phi0 / sin_phi0;
    Ok((on_x0, on_xt))
}

/// Mean of the Riemannian normal, on the `x0`-`xT` great circle.
pub fn mean_point(x0: &SpherePoint, xt: &SpherePoint, alpha: f64) -> Result<SpherePoint> {
    if x0.dim() != xt.dim() {
        return Err(Error::DimensionMismatch {
            expected: x0.dim(),
            got: xt.dim(),
        });
    }
    let (a, b) = mean_coefficients(x0.inner(xt), alpha)?;
    let v: Vec<f64> = x0
        .coords()
        .iter()
        .zip(xt.coords())
        .map(|(p, q)| a * p + b * q)
        .collect();
    SpherePoint::new(v)
}

/// `exp_mu(rho P_mu w)` in place, `w` standard normal in the ambient space.
/// `out` starts as `mu` (unit norm); `scratch` has the same length.
pub fn perturb_raw<R: Rng + ?Sized>(out: &mut [f64], rho: f64, rng: &mut R, scratch: &mut [f64]) {
    if rho == 0.0 {
        return;
    }
    rng::fill_normal(rng, scratch);
    scratch.iter_mut().for_each(|w| *w *= rho);
    geometry::project_raw(out, scratch);
    let base = out.to_vec();
    geometry::exp_map_raw(&base, scratch, out);
}

pub fn sample<R: Rng + ?Sized>(params: &RNormalParams, rng: &mut R) -> SpherePoint {
    let mut out = params.mu.coords().to_vec();
    let mut scratch = vec![0.0; out.len()];
    perturb_raw(&mut out, params.rho, rng, &mut scratch);
    if params.rho == 0.0 {
        params.mu.clone()
    } else {
        SpherePoint::new(out).expect("exp map output is unit norm")
    }
}

/// Draw `X_t` given endpoints from the table-driven surrogate.
pub fn sample_xt<R: Rng + ?Sized>(
    x0: &SpherePoint,
    xt: &SpherePoint,
    table: &PrecomputedTable,
    t: f64,
    rng: &mut R,
) -> Result<SpherePoint> {
    table.check_matches(x0.dim(), x0.inner(xt))?;
    let (alpha, rho) = table.interpolate(t)?;
    let mu = mean_point(x0, xt, alpha)?;
    Ok(sample(&RNormalParams::new(mu, rho)?, rng))
}

/// Sampler for one table with the endpoint geometry resolved once.
///
/// Every draw shares the initial point `x0` and targets a vertex `e_k`, which
/// is what training needs per token.
#[derive(Debug, Clone)]
pub struct VertexSampler<'a> {
    table: &'a PrecomputedTable,
    x0: &'a [f64],
}

impl<'a> VertexSampler<'a> {
    pub fn new(table: &'a PrecomputedTable, x0: &'a SpherePoint) -> Self {
        Self { table, x0: x0.coords() }
    }

    /// Writes a draw of `X_t` for target `e_k` into `out`.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        k: usize,
        t: f64,
        rng: &mut R,
        out: &mut [f64],
        scratch: &mut [f64],
    ) -> Result<()> {
        let psi0 = self.x0[k];
        if (psi0 - self.table.psi0).abs() > 1e-9 {
            return Err(Error::TableMismatch(format!(
                "initial projection on axis {k} is {psi0}, table has {}",
                self.table.psi0
            )));
        }
        let (alpha, rho) = self.table.interpolate(t)?;
        let (a, b) = mean_coefficients(psi0, alpha)?;
        out.iter_mut().zip(self.x0).for_each(|(o, &u)| *o = a * u);
        out[k] += b;
        geometry::normalize_raw(out)?;
        perturb_raw(out, rho, rng, scratch);
        Ok(())
    }
}

fn kernel(x: &SpherePoint, y: &SpherePoint, inv_two_h2: f64) -> f64 {
    let d = geometry::geodesic_distance(x, y);
    (-d * d * inv_two_h2).exp()
}

fn kernel_sums(a: &[SpherePoint], b: &[SpherePoint], h: f64) -> (f64, f64, f64) {
    let c = 1.0 / (2.0 * h * h);
    let within = |s: &[SpherePoint]| {
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                total += kernel(&s[i], &s[j], c);
            }
        }
        2.0 * total
    };
    let cross: f64 = a.iter().map(|x| b.iter().map(|y| kernel(x, y, c)).sum::<f64>()).sum();
    (within(a), within(b), cross)
}

fn check_sets(a: &[SpherePoint], b: &[SpherePoint], h: f64) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("MMD needs non-empty sample sets".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")));
    }
    Ok(())
}

/// Unbiased MMD^2 with kernel `exp(-d_g(x, y)^2 / (2 h^2))`. Needs at least
/// two samples per set; may be negative.
pub fn mmd2(a: &[SpherePoint], b: &[SpherePoint], h: f64) -> Result<f64> {
    check_sets(a, b, h)?;
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidParameter("unbiased MMD needs two samples per set".into()));
    }
    let (m, n) = (a.len() as f64, b.len() as f64);
    let (kaa, kbb, kab) = kernel_sums(a, b, h);
    Ok(kaa / (m * (m - 1.0)) + kbb / (n * (n - 1.0)) - 2.0 * kab / (m * n))
}

/// Biased (V-statistic) MMD^2; always nonnegative.
pub fn mmd2_biased(a: &[SpherePoint], b: &[SpherePoint], h: f64) -> Result<f64> {
    check_sets(a, b, h)?;
    let (m, n) = (a.len() as f64, b.len() as f64);
    let (kaa, kbb, kab) = kernel_sums(a, b, h);
    Ok(((kaa + m) / (m * m) + (kbb + n) / (n * n) - 2.0 * kab / (m * n)).max(0.0))
}

/// Median pairwise geodesic distance, the usual bandwidth heuristic.
pub fn median_distance(points: &[SpherePoint]) -> Option<f64> {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(geometry::geodesic_distance(&points[i], &points[j]));
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}
