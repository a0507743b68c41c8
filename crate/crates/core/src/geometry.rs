//! Unit sphere S^{d-1} in ambient coordinates, its tangent spaces, and the
//! square-root map between the probability simplex and the positive orthant.
//!
//! The typed API (`SpherePoint`, `TangentVector`, `SimplexPoint`) validates
//! its invariants. The `*_raw` kernels work on slices and are what the
//! simulation loops call, so that a step allocates nothing.

use crate::error::{Error, Result};

/// Inner products are kept this far away from +-1 before inverse cosines.
pub const INNER_CLAMP: f64 = 1e-12;

/// Negative simplex coordinates down to this value are treated as zero.
pub const SIMPLEX_TOL: f64 = 1e-9;

const SERIES_CUTOFF: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SpherePoint {
    coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: SpherePoint,
    vec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint {
    probs: Vec<f64>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Rescale `v` to unit length in place.
pub fn normalize_raw(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::DegenerateVector);
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(())
}

/// sin(x)/x with the series branch near zero.
fn sinc(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

impl SpherePoint {
    /// Normalizes `coords` onto the sphere.
    pub fn new(mut coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::DimensionTooSmall(coords.len()));
        }
        normalize_raw(&mut coords)?;
        Ok(Self { coords })
    }

    /// Vertex `e_k` of the sphere (and of the simplex).
    pub fn one_hot(dim: usize, k: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimensionTooSmall(dim));
        }
        if k >= dim {
            return Err(Error::TokenOutOfRange { token: k, vocab: dim });
        }
        let mut coords = vec![0.0; dim];
        coords[k] = 1.0;
        Ok(Self { coords })
    }

    /// Image of the uniform distribution over the first `support` axes,
    /// i.e. `sum_{i<support} e_i / sqrt(support)`.
    pub fn barycenter(dim: usize, support: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimensionTooSmall(dim));
        }
        if support == 0 || support > dim {
            return Err(Error::InvalidParameter(format!(
                "barycenter support {support} for dimension {dim}"
            )));
        }
        let v = 1.0 / (support as f64).sqrt();
        let mut coords = vec![0.0; dim];
        coords[..support].iter_mut().for_each(|c| *c = v);
        Ok(Self { coords })
    }

    /// Wraps coordinates that are already unit-norm (renormalizes anyway).
    pub(crate) fn from_unit(mut coords: Vec<f64>) -> Self {
        debug_assert!(coords.len() >= 2);
        let n = norm(&coords);
        if n.is_finite() && n > 0.0 && (n - 1.0).abs() > 1e-15 {
            coords.iter_mut().for_each(|c| *c /= n);
        }
        Self { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn inner(&self, other: &SpherePoint) -> f64 {
        dot(&self.coords, &other.coords)
    }

    /// Index of the largest coordinate (ties broken toward the lower index).
    pub fn argmax(&self) -> usize {
        argmax(&self.coords)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl TangentVector {
    /// Tangent vector at `base`; rejects vectors with a normal component.
    pub fn new(base: SpherePoint, vec: Vec<f64>) -> Result<Self> {
        check_dim(base.dim(), vec.len())?;
        let normal = dot(&vec, base.coords());
        if normal.abs() > 1e-9 * (1.0 + norm(&vec)) {
            return Err(Error::InvalidParameter(format!(
                "vector has normal component {normal} at its base point"
            )));
        }
        Ok(Self { base, vec })
    }

    pub(crate) fn from_parts(base: SpherePoint, vec: Vec<f64>) -> Self {
        Self { base, vec }
    }

    pub fn zero(base: SpherePoint) -> Self {
        let vec = vec![0.0; base.dim()];
        Self { base, vec }
    }

    pub fn base(&self) -> &SpherePoint {
        &self.base
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vec
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vec)
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.vec.iter_mut().for_each(|v| *v *= factor);
        self
    }
}

impl SimplexPoint {
    /// Validates nonnegativity (small negatives are clipped) and normalization.
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        for (index, p) in probs.iter_mut().enumerate() {
            if !p.is_finite() || *p < -SIMPLEX_TOL {
                return Err(Error::NegativeCoordinate { index, value: *p });
            }
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    pub fn vertex(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::TokenOutOfRange { token: k, vocab: dim });
        }
        let mut probs = vec![0.0; dim];
        probs[k] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(dim: usize) -> Self {
        Self {
            probs: vec![1.0 / dim as f64; dim],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }
}

/// exp_u(v) written into `out`; `v` must be tangent at `u`.
pub fn exp_map_raw(u: &[f64], v: &[f64], out: &mut [f64]) {
    let n = norm(v);
    let (c, s) = (n.cos(), sinc(n));
    for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
        *o = c * a + s * b;
    }
    // Rounding drift only; the closed form is unit-norm.
    let m = norm(out);
    out.iter_mut().for_each(|o| *o /= m);
}

pub fn exp_map(u: &SpherePoint, x: &TangentVector) -> Result<SpherePoint> {
    check_dim(u.dim(), x.vec.len())?;
    let offset = u
        .coords
        .iter()
        .zip(x.base.coords())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if offset > 1e-12 {
        return Err(Error::InvalidParameter(
            "tangent vector is attached at a different point".into(),
        ));
    }
    let mut out = vec![0.0; u.dim()];
    exp_map_raw(&u.coords, &x.vec, &mut out);
    Ok(SpherePoint { coords: out })
}

/// Scale factor `theta / sin(theta)` and angle for the pair with inner
/// product `c` and residual norm `s = |v - c u|`.
#[inline]
pub(crate) fn log_factor(c: f64, s: f64) -> (f64, f64) {
    let theta = s.atan2(c);
    let factor = if s > 0.0 { theta / s } else { 1.0 };
    (factor, theta)
}

/// log_u(v) written into `out`.
pub fn log_map_raw(u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
    let c = dot(u, v);
    if c <= -1.0 + INNER_CLAMP {
        return Err(Error::AntipodalPoints { inner: c });
    }
    for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
        *o = b - c * a;
    }
    let s = norm(out);
    let (factor, _) = log_factor(c, s);
    out.iter_mut().for_each(|o| *o *= factor);
    Ok(())
}

pub fn log_map(u: &SpherePoint, v: &SpherePoint) -> Result<TangentVector> {
    check_dim(u.dim(), v.dim())?;
    let mut out = vec![0.0; u.dim()];
    log_map_raw(&u.coords, &v.coords, &mut out)?;
    Ok(TangentVector {
        base: u.clone(),
        vec: out,
    })
}

/// Great-circle distance in radians, in [0, pi].
pub fn geodesic_distance_raw(u: &[f64], v: &[f64]) -> f64 {
    // 2 atan2(|u - v|, |u + v|) is accurate at both ends, unlike acos.
    let (mut minus, mut plus) = (0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        minus += (a - b) * (a - b);
        plus += (a + b) * (a + b);
    }
    2.0 * minus.sqrt().atan2(plus.sqrt())
}

pub fn geodesic_distance(u: &SpherePoint, v: &SpherePoint) -> f64 {
    geodesic_distance_raw(&u.coords, &v.coords)
}

/// Componentwise square root: simplex to positive orthant.
pub fn simplex_to_sphere(p: &SimplexPoint) -> Result<SpherePoint> {
    if p.dim() < 2 {
        return Err(Error::DimensionTooSmall(p.dim()));
    }
    SpherePoint::new(p.probs.iter().map(|x| x.sqrt()).collect())
}

/// Componentwise square: positive orthant to simplex.
pub fn sphere_to_simplex(u: &SpherePoint) -> Result<SimplexPoint> {
    let mut probs = Vec::with_capacity(u.dim());
    for (index, &x) in u.coords.iter().enumerate() {
        if x < -SIMPLEX_TOL {
            return Err(Error::NegativeCoordinate { index, value: x });
        }
        let x = x.max(0.0);
        probs.push(x * x);
    }
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Ok(SimplexPoint { probs })
}

/// Removes the component of `w` along the unit vector `u`, in place.
pub fn project_raw(u: &[f64], w: &mut [f64]) {
    let c = dot(u, w);
    for (x, a) in w.iter_mut().zip(u) {
        *x -= c * a;
    }
}

pub fn tangent_project(u: &SpherePoint, w: &[f64]) -> Result<TangentVector> {
    check_dim(u.dim(), w.len())?;
    let mut vec = w.to_vec();
    project_raw(&u.coords, &mut vec);
    Ok(TangentVector { base: u.clone(), vec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn e(d: usize, k: usize) -> SpherePoint {
        SpherePoint::one_hot(d, k).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let u = e(3, 0);
        let out = exp_map(&u, &TangentVector::zero(u.clone())).unwrap();
        assert_eq!(out, u);
    }

    #[test]
    fn exp_quarter_circle() {
        let u = e(3, 0);
        let x = TangentVector::new(u.clone(), vec![0.0, FRAC_PI_2, 0.0]).unwrap();
        let out = exp_map(&u, &x).unwrap();
        assert!(close(out.coords(), e(3, 1).coords(), 1e-15));
    }

    #[test]
    fn exp_of_tiny_vector() {
        let u = SpherePoint::new(vec![0.3, -0.4, 0.5, 0.2]).unwrap();
        let t = tangent_project(&u, &[1.0, 2.0, -1.0, 0.5]).unwrap();
        let t = t.clone().scaled(1e-9 / t.norm());
        let out = exp_map(&u, &t).unwrap();
        // Within 1e-12 of u; the displacement itself is 1e-9.
        let expected: Vec<f64> = u.coords().iter().zip(t.vec()).map(|(a, b)| a + b).collect();
        assert!(close(out.coords(), &expected, 1e-17 + 1e-15));
        assert!(close(out.coords(), u.coords(), 1e-8));
    }

    #[test]
    fn exp_rejects_foreign_base() {
        let u = e(3, 0);
        let x = TangentVector::zero(e(3, 1));
        assert!(exp_map(&u, &x).is_err());
        assert!(matches!(
            exp_map(&u, &TangentVector::zero(e(4, 0))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn log_of_coincident_is_zero() {
        let u = e(4, 2);
        assert!(log_map(&u, &u).unwrap().vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn log_of_orthogonal_one_hots() {
        let out = log_map(&e(3, 0), &e(3, 1)).unwrap();
        assert!(close(out.vec(), &[0.0, FRAC_PI_2, 0.0], 1e-15));
    }

    #[test]
    fn log_rejects_antipodes() {
        let u = SpherePoint::new(vec![1.0, 1.0]).unwrap();
        let v = SpherePoint::new(vec![-1.0, -1.0]).unwrap();
        assert!(matches!(log_map(&u, &v), Err(Error::AntipodalPoints { .. })));
    }

    #[test]
    fn distances() {
        assert!((geodesic_distance(&e(5, 0), &e(5, 3)) - FRAC_PI_2).abs() < 1e-15);
        let u = SpherePoint::new(vec![0.2, 0.9, -0.1]).unwrap();
        assert_eq!(geodesic_distance(&u, &u), 0.0);
        for d in [2, 3, 8, 100] {
            let bary = SpherePoint::barycenter(d, d).unwrap();
            let expected = (1.0 / (d as f64).sqrt()).acos();
            assert!((geodesic_distance(&bary, &e(d, d - 1)) - expected).abs() < 1e-14);
        }
        let neg = SpherePoint::new(vec![-0.2, -0.9, 0.1]).unwrap();
        assert!((geodesic_distance(&u, &neg) - PI).abs() < 1e-15);
    }

    #[test]
    fn diffeomorphism_examples() {
        let p = SimplexPoint::new(vec![0.25, 0.25, 0.5]).unwrap();
        let u = simplex_to_sphere(&p).unwrap();
        assert!(close(u.coords(), &[0.5, 0.5, 0.5f64.sqrt()], 1e-15));
        let v = simplex_to_sphere(&SimplexPoint::vertex(4, 2).unwrap()).unwrap();
        assert_eq!(v, e(4, 2));
        let q = sphere_to_simplex(&e(4, 2)).unwrap();
        assert_eq!(q.probs(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn sphere_to_simplex_clips_tiny_negatives_only() {
        let u = SpherePoint::from_unit(vec![-1e-12, 1.0]);
        assert!(sphere_to_simplex(&u).is_ok());
        let u = SpherePoint::new(vec![-0.1, 1.0]).unwrap();
        assert!(matches!(
            sphere_to_simplex(&u),
            Err(Error::NegativeCoordinate { index: 0, .. })
        ));
        assert!(SimplexPoint::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn tangent_projection_examples() {
        let u = e(3, 0);
        assert!(tangent_project(&u, &[1.0, 0.0, 0.0])
            .unwrap()
            .vec()
            .iter()
            .all(|v| *v == 0.0));
        assert_eq!(tangent_project(&u, &[0.0, 1.0, 0.0]).unwrap().vec(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constructors_validate() {
        assert!(matches!(SpherePoint::new(vec![1.0]), Err(Error::DimensionTooSmall(1))));
        assert!(SpherePoint::new(vec![0.0, 0.0]).is_err());
        assert!(SpherePoint::one_hot(3, 3).is_err());
        let u = e(3, 0);
        assert!(TangentVector::new(u, vec![0.5, 1.0, 0.0]).is_err());
    }

    fn arb_point(d: usize) -> impl Strategy<Value = SpherePoint> {
        prop::collection::vec(-1.0f64..1.0, d)
            .prop_filter("nonzero", |v| norm(v) > 1e-3)
            .prop_map(|v| SpherePoint::new(v).unwrap())
    }

    /// Random tangent vector at a random point with norm in [0, max_norm].
    fn arb_pair(max_norm: f64) -> impl Strategy<Value = (SpherePoint, TangentVector)> {
        (2usize..9).prop_flat_map(move |d| {
            (arb_point(d), prop::collection::vec(-1.0f64..1.0, d), 0.0..max_norm).prop_filter_map(
                "tangent",
                |(u, w, len)| {
                    let t = tangent_project(&u, &w).ok()?;
                    let n = t.norm();
                    (n > 1e-6).then(|| (u, t.scaled(len / n)))
                },
            )
        })
    }

    proptest! {
        #[test]
        fn exp_stays_on_sphere((u, x) in arb_pair(10.0)) {
            let out = exp_map(&u, &x).unwrap();
            prop_assert!((norm(out.coords()) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn log_inverts_exp((u, x) in arb_pair(PI - 0.1)) {
            let v = exp_map(&u, &x).unwrap();
            let back = log_map(&u, &v).unwrap();
            let err = back.vec().iter().zip(x.vec()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err <= 1e-8, "err {err}");
            prop_assert!((geodesic_distance(&u, &v) - x.norm()).abs() < 1e-9);
        }

        #[test]
        fn exp_inverts_log(u in arb_point(5), v in arb_point(5)) {
            prop_assume!(u.inner(&v) > -1.0 + 1e-6);
            let x = log_map(&u, &v).unwrap();
            prop_assert!((x.norm() - geodesic_distance(&u, &v)).abs() < 1e-9);
            let w = exp_map(&u, &x).unwrap();
            prop_assert!(close(w.coords(), v.coords(), 1e-8));
        }

        #[test]
        fn projection_is_orthogonal(u in arb_point(6), w in prop::collection::vec(-5.0f64..5.0, 6)) {
            let t = tangent_project(&u, &w).unwrap();
            prop_assert!(dot(t.vec(), u.coords()).abs() < 1e-12);
        }

        #[test]
        fn simplex_round_trip(raw in prop::collection::vec(0.0f64..1.0, 2..10)) {
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 1e-6);
            let p = SimplexPoint::new(raw.iter().map(|x| x / sum).collect()).unwrap();
            let q = sphere_to_simplex(&simplex_to_sphere(&p).unwrap()).unwrap();
            prop_assert!(close(p.probs(), q.probs(), 1e-12));
        }

        /// log_x(v) = -r(x) grad r(x) with r = d_g(., v); the Riemannian
        /// gradient comes from central differences of r along tangent axes.
        #[test]
        fn radial_identity(x in arb_point(4), v in arb_point(4)) {
            let c = x.inner(&v);
            prop_assume!(c.abs() < 0.95);
            let r = |p: &[f64]| {
                let mut q = p.to_vec();
                normalize_raw(&mut q).unwrap();
                dot(&q, v.coords()).clamp(-1.0, 1.0).acos()
            };
            let h = 1e-5;
            let mut grad = vec![0.0; 4];
            for i in 0..4 {
                let mut plus = x.coords().to_vec();
                let mut minus = x.coords().to_vec();
                plus[i] += h;
                minus[i] -= h;
                grad[i] = (r(&plus) - r(&minus)) / (2.0 * h);
            }
            project_raw(x.coords(), &mut grad);
            let r0 = r(x.coords());
            let lhs = log_map(&x, &v).unwrap();
            for (a, g) in lhs.vec().iter().zip(&grad) {
                prop_assert!((a + r0 * g).abs() < 1e-8, "{a} vs {}", -r0 * g);
            }
        }
    }
}
