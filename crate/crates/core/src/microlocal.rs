//! Accessible covectors, the canonical relation of the cone transform and its
//! inversion, the disk invisible set, per-voxel visibility maps and the
//! phase-space visibility filter.
//!
//! Canonical relation, for a cone `(u, beta, phi)` conormal to `(z, zeta)`:
//!
//! ```text
//! m = (z - u) / |z - u|,       zeta = -lambda (beta - m cos phi)
//! u_hat = J1^T zeta,           beta_hat = lambda J2^T (z - u),
//! phi_hat = lambda |z - u| sin phi
//! ```
//!
//! Sampling uses the branch `beta = cos phi m - sin phi zeta / |zeta|`,
//! `lambda = |zeta| / sin phi > 0`.

use crate::cone_transform::{VolumeGrid, VolumeSpec};
use crate::geometry::{
    cone_frame, Aabb, Cone, Curve, DetectorSurface, DirectionChart, GeometryError, PlaneDisk, Sphere, Vec3,
    VertexChart, POLE_THRESHOLD,
};
use crate::spectral::{fft_nd, wavenumber};
use crate::weights::{weight_nonvanishing_on, WeightError, WeightSpec};
use nalgebra::Vector2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use std::f64::consts::{FRAC_PI_2, TAU};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;

/// `|Q|` below this is the boundary band of the disk classifier.
pub const BOUNDARY_BAND: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MicrolocalError {
    #[error("covector is not accessible from the detector")]
    NotAccessible,
    #[error("continuation of the conormal vertex set failed: {0}")]
    ChartSeam(String),
    #[error("cone-side data is not in the image of an accessible covector: {0}")]
    InaccessibleInput(&'static str),
    #[error("direction chart is degenerate (|cos theta| = {0:.6})")]
    PoleDegenerate(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Weight(#[from] WeightError),
}

impl From<GeometryError> for MicrolocalError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::PoleDegenerate(c) => MicrolocalError::PoleDegenerate(c),
            other => MicrolocalError::ChartSeam(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, MicrolocalError>;

/// A point `(z, zeta)` of phase space over the volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covector {
    pub z: Vec3,
    pub zeta: Vec3,
}

impl Covector {
    pub fn new(z: Vec3, zeta: Vec3) -> Result<Self> {
        if !(zeta.norm() > 0.0) || !z.iter().chain(zeta.iter()).all(|v| v.is_finite()) {
            return Err(MicrolocalError::InvalidInput("covector needs finite z and nonzero zeta".into()));
        }
        Ok(Covector { z, zeta })
    }
}

/// Cone-side coordinates `(u, beta, phi, u_hat, beta_hat, phi_hat)` together
/// with the charts they are expressed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeCovector {
    pub u: Vec3,
    pub u_chart: VertexChart,
    pub u_params: [f64; 2],
    pub beta: Vec3,
    pub beta_chart: DirectionChart,
    pub phi: f64,
    pub u_hat: Vec2,
    pub beta_hat: Vec2,
    pub phi_hat: f64,
}

/// A point of the canonical relation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalPoint {
    pub cone: ConeCovector,
    pub z: Vec3,
    pub zeta: Vec3,
    pub lambda: f64,
}

impl CanonicalPoint {
    pub fn as_cone(&self) -> Cone {
        Cone { vertex: self.cone.u, axis: self.cone.beta, opening: self.cone.phi }
    }

    pub fn covector(&self) -> Covector {
        Covector { z: self.z, zeta: self.zeta }
    }

    /// `(z - u) . beta - |z - u| cos phi`.
    pub fn phase(&self) -> f64 {
        self.as_cone().phase(&self.z)
    }
}

/// Whether the plane through `z` conormal to `zeta` meets the detector
/// non-tangentially.
pub fn is_accessible(surface: &DetectorSurface, cv: &Covector) -> bool {
    match surface {
        DetectorSurface::PlaneDisk(p) => match p.radius {
            Some(_) => disk_quadratic(p, cv) > BOUNDARY_BAND,
            None => {
                let zn = cv.zeta.dot(&p.normal);
                let tangential = (cv.zeta - p.normal * zn).norm();
                tangential > 1e-12 * cv.zeta.norm()
            }
        },
        DetectorSurface::Sphere(s) => {
            let d = (cv.z - s.center).dot(&cv.zeta.normalize()).abs();
            d < s.radius
        }
        DetectorSurface::Curve(c) => !curve_roots(c, cv, CURVE_SCAN).is_empty(),
    }
}

/// `Q = (zeta_1^2 + zeta_2^2) R^2 - (z . zeta)^2` for the disk of radius `R`
/// in the plane `x3 = 0` centered at the origin. `Q > 0` accessible, `Q < 0`
/// unrecoverable.
pub fn disk_invisible(z: &Vec3, zeta: &Vec3, radius: f64) -> f64 {
    (zeta[0] * zeta[0] + zeta[1] * zeta[1]) * radius * radius - z.dot(zeta).powi(2)
}

/// [`disk_invisible`] for an arbitrary disk, in its local frame.
pub fn disk_quadratic(disk: &PlaneDisk, cv: &Covector) -> f64 {
    let r = disk.radius.unwrap_or(f64::INFINITY);
    let a = cv.zeta.dot(&disk.e1);
    let b = cv.zeta.dot(&disk.e2);
    let zz = (cv.z - disk.center).dot(&cv.zeta);
    (a * a + b * b) * r * r - zz * zz
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiskClass {
    Accessible,
    Unrecoverable,
    Boundary,
}

pub fn classify_disk(z: &Vec3, zeta: &Vec3, radius: f64) -> DiskClass {
    let q = disk_invisible(z, zeta, radius);
    if q.abs() < BOUNDARY_BAND {
        DiskClass::Boundary
    } else if q > 0.0 {
        DiskClass::Accessible
    } else {
        DiskClass::Unrecoverable
    }
}

/// Deterministic near-uniform directions on the upper hemisphere.
pub fn fibonacci_hemisphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let h = (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - h * h).sqrt();
            let a = golden * i as f64;
            Vec3::new(rho * a.cos(), rho * a.sin(), h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuyReport {
    pub total: usize,
    pub accessible: usize,
    pub fraction: f64,
    /// First violating covectors in scan order (at most 32).
    pub violators: Vec<Covector>,
}

/// Evaluates [`is_accessible`] on `n_per_axis^3` cell centers of `volume` times
/// `n_dir` hemisphere directions.
pub fn tuy_check(surface: &DetectorSurface, volume: &Aabb, n_per_axis: usize, n_dir: usize) -> TuyReport {
    let dirs = fibonacci_hemisphere(n_dir);
    let ext = volume.max - volume.min;
    let mut total = 0;
    let mut accessible = 0;
    let mut violators = Vec::new();
    for i in 0..n_per_axis {
        for j in 0..n_per_axis {
            for k in 0..n_per_axis {
                let f = |n: usize| (n as f64 + 0.5) / n_per_axis as f64;
                let z = volume.min + Vec3::new(ext[0] * f(i), ext[1] * f(j), ext[2] * f(k));
                for d in &dirs {
                    total += 1;
                    let cv = Covector { z, zeta: *d };
                    if is_accessible(surface, &cv) {
                        accessible += 1;
                    } else if violators.len() < 32 {
                        violators.push(cv);
                    }
                }
            }
        }
    }
    TuyReport { total, accessible, fraction: accessible as f64 / total.max(1) as f64, violators }
}

/// Midpoints of `(eps, pi/2 - eps)`.
pub fn phi_samples(n_phi: usize, eps: f64) -> Vec<f64> {
    let span = FRAC_PI_2 - 2.0 * eps;
    (0..n_phi).map(|i| eps + span * (i as f64 + 0.5) / n_phi as f64).collect()
}

/// The canonical point over `(z, zeta)` with vertex `u` and opening angle `phi`.
pub fn canonical_point(surface: &DetectorSurface, cv: &Covector, u: &Vec3, phi: f64) -> Result<CanonicalPoint> {
    let d = cv.z - u;
    let dist = d.norm();
    let m = d / dist;
    let zn = cv.zeta.norm();
    let (sp, cp) = phi.sin_cos();
    let beta = m * cp - cv.zeta * (sp / zn);
    let lambda = zn / sp;
    let beta_chart = DirectionChart::for_direction(&beta, POLE_THRESHOLD);
    let j2 = beta_chart.jacobian(POLE_THRESHOLD)?;
    let (u_chart, u_params) = surface.chart_for_point(u)?;
    let j1 = surface.chart_jacobian(u_chart, u_params)?;
    let cone = ConeCovector {
        u: *u,
        u_chart,
        u_params,
        beta,
        beta_chart,
        phi,
        u_hat: j1.transpose() * cv.zeta,
        beta_hat: j2.transpose() * d * lambda,
        phi_hat: lambda * dist * sp,
    };
    Ok(CanonicalPoint { cone, z: cv.z, zeta: cv.zeta, lambda })
}

/// Samples `n_u` vertices of `U = S cap H(z, zeta)` and `n_phi` opening angles
/// and returns the canonical points over `(z, zeta)`.
pub fn canonical_sample(
    surface: &DetectorSurface,
    cv: &Covector,
    n_u: usize,
    n_phi: usize,
    eps: f64,
) -> Result<Vec<CanonicalPoint>> {
    if !is_accessible(surface, cv) {
        return Err(MicrolocalError::NotAccessible);
    }
    let verts = conormal_vertices(surface, cv, n_u)?;
    let phis = phi_samples(n_phi, eps);
    let mut out = Vec::with_capacity(verts.len() * phis.len());
    for u in &verts {
        for &phi in &phis {
            out.push(canonical_point(surface, cv, u, phi)?);
        }
    }
    Ok(out)
}

/// `n_u` points of the vertex set `U = S cap H(z, zeta)`.
pub fn conormal_vertices(surface: &DetectorSurface, cv: &Covector, n_u: usize) -> Result<Vec<Vec3>> {
    if n_u == 0 {
        return Err(MicrolocalError::InvalidInput("n_u must be positive".into()));
    }
    match surface {
        DetectorSurface::PlaneDisk(p) => plane_vertices(p, cv, n_u),
        DetectorSurface::Sphere(s) => {
            let trace = trace_sphere_section(s, cv, s.radius / 64.0)?;
            let n = trace.len();
            Ok((0..n_u).map(|k| trace[k * n / n_u]).collect())
        }
        DetectorSurface::Curve(_) => Err(MicrolocalError::InvalidInput(
            "curve detectors use the restricted canonical relation".into(),
        )),
    }
}

/// The line `U` in a plane chart: the coordinate with the larger `|r_i . zeta|`
/// is solved for, the other one is sampled.
fn plane_vertices(p: &PlaneDisk, cv: &Covector, n_u: usize) -> Result<Vec<Vec3>> {
    let a = [p.e1.dot(&cv.zeta), p.e2.dot(&cv.zeta)];
    let (solved, free) = if a[1].abs() >= a[0].abs() { (1, 0) } else { (0, 1) };
    if a[solved].abs() <= 1e-12 * cv.zeta.norm() {
        return Err(MicrolocalError::NotAccessible);
    }
    let rhs = (cv.z - p.center).dot(&cv.zeta);
    // v_solved = (rhs - v_free a_free) / a_solved
    let point = |vf: f64| {
        let mut v = [0.0; 2];
        v[free] = vf;
        v[solved] = (rhs - vf * a[free]) / a[solved];
        v
    };
    let (lo, hi) = match p.radius {
        Some(r) => {
            // v_f^2 + ((rhs - v_f a_f) / a_s)^2 < r^2
            let (af, as_) = (a[free], a[solved]);
            let qa = as_ * as_ + af * af;
            let qb = -2.0 * rhs * af;
            let qc = rhs * rhs - r * r * as_ * as_;
            let disc = qb * qb - 4.0 * qa * qc;
            if !(disc > 0.0) {
                return Err(MicrolocalError::NotAccessible);
            }
            let sq = disc.sqrt();
            ((-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa))
        }
        None => {
            let zl = cv.z - p.center;
            let c = [zl.dot(&p.e1), zl.dot(&p.e2)][free];
            let span = 2.0 * zl.dot(&p.normal).abs().max(1.0);
            (c - span, c + span)
        }
    };
    Ok((0..n_u)
        .map(|k| {
            let v = point(lo + (hi - lo) * (k as f64 + 0.5) / n_u as f64);
            p.center + p.e1 * v[0] + p.e2 * v[1]
        })
        .collect())
}

/// Traces the closed curve `sphere cap H(z, zeta)` by predictor steps of
/// arclength `step` in the best graph chart, each corrected by Newton's method
/// on `g = (z - u) . zeta` in the chart coordinate with the largest
/// `|r_i . zeta|`. Returns points spaced about `step` apart.
pub fn trace_sphere_section(s: &Sphere, cv: &Covector, step: f64) -> Result<Vec<Vec3>> {
    let zhat = cv.zeta.normalize();
    let d = (cv.z - s.center).dot(&zhat);
    if d.abs() >= s.radius {
        return Err(MicrolocalError::NotAccessible);
    }
    let surface = DetectorSurface::Sphere(s.clone());
    let seed = s.center + zhat * d + cone_frame(&zhat).0 * (s.radius * s.radius - d * d).sqrt();
    let mut h = step;
    for _ in 0..5 {
        match trace_once(&surface, s, cv, seed, h) {
            Ok(pts) if pts.len() >= 16 => return Ok(pts),
            Ok(_) | Err(_) => h *= 0.25,
        }
    }
    Err(MicrolocalError::ChartSeam("sphere section did not close".into()))
}

fn trace_once(surface: &DetectorSurface, s: &Sphere, cv: &Covector, seed: Vec3, step: f64) -> Result<Vec<Vec3>> {
    let g = |u: &Vec3| (cv.z - u).dot(&cv.zeta);
    let tol = 1e-14 * cv.zeta.norm() * (s.radius + (cv.z - s.center).norm());
    let max_steps = (8.0 * std::f64::consts::PI * s.radius / step) as usize + 64;
    let mut pts = vec![seed];
    let mut u = seed;
    let mut prev_t: Option<Vec3> = None;
    for n in 0..max_steps {
        let (chart, v) = surface.chart_for_point(&u)?;
        let j = surface.chart_jacobian(chart, v)?;
        let r = [j.column(0).into_owned(), j.column(1).into_owned()];
        let a = [r[0].dot(&cv.zeta), r[1].dot(&cv.zeta)];
        let (solved, free) = if a[1].abs() >= a[0].abs() { (1, 0) } else { (0, 1) };
        if a[solved].abs() <= 1e-14 * cv.zeta.norm() {
            return Err(MicrolocalError::ChartSeam("conormal plane tangent to the detector".into()));
        }
        let mut dv = [0.0; 2];
        dv[free] = 1.0;
        dv[solved] = -a[free] / a[solved];
        let t3 = r[0] * dv[0] + r[1] * dv[1];
        let mut scale = step / t3.norm();
        if let Some(pt) = prev_t {
            if pt.dot(&t3) < 0.0 {
                scale = -scale;
            }
        }
        prev_t = Some(t3 * scale.signum());
        let mut w = [v[0] + dv[0] * scale, v[1] + dv[1] * scale];
        let mut converged = false;
        for _ in 0..50 {
            let un = surface.chart_point(chart, w)?;
            let gv = g(&un);
            if gv.abs() <= tol {
                converged = true;
                break;
            }
            let jn = surface.chart_jacobian(chart, w)?;
            let deriv = -jn.column(solved).dot(&cv.zeta);
            if deriv == 0.0 {
                break;
            }
            w[solved] -= gv / deriv;
        }
        if !converged {
            return Err(MicrolocalError::ChartSeam("Newton correction did not converge".into()));
        }
        u = surface.chart_point(chart, w)?;
        if n >= 2 && (u - seed).norm() < 0.75 * step {
            return Ok(pts);
        }
        pts.push(u);
    }
    Err(MicrolocalError::ChartSeam("step budget exhausted".into()))
}

/// Unique covector over the cone-side data, from
/// `m = cos phi beta + (sin phi / phi_hat)(beta_hat_1 beta_1 + beta_hat_2 / sin theta beta_2)`,
/// `lambda = |u_hat| sgn(phi_hat) / |J1^T (beta - m cos phi)|`,
/// `z = u + phi_hat / (lambda sin phi) m`, `zeta = -lambda (beta - m cos phi)`.
pub fn recover_covector(surface: &DetectorSurface, cs: &ConeCovector) -> Result<(Covector, f64)> {
    if cs.u_hat.norm() == 0.0 {
        return Err(MicrolocalError::InaccessibleInput("u_hat vanishes"));
    }
    if cs.phi_hat == 0.0 || !cs.phi_hat.is_finite() {
        return Err(MicrolocalError::InaccessibleInput("phi_hat vanishes"));
    }
    // validates the chart away from its pole
    cs.beta_chart.jacobian(POLE_THRESHOLD)?;
    let (_, b1, b2) = cs.beta_chart.frame();
    let st = cs.beta_chart.theta.sin();
    let (sp, cp) = cs.phi.sin_cos();
    let m = cs.beta * cp + (b1 * cs.beta_hat[0] + b2 * (cs.beta_hat[1] / st)) * (sp / cs.phi_hat);
    let j1 = surface.chart_jacobian(cs.u_chart, cs.u_params)?;
    let w = cs.beta - m * cp;
    let denom = (j1.transpose() * w).norm();
    if denom == 0.0 {
        return Err(MicrolocalError::InaccessibleInput("J1^T (beta - m cos phi) vanishes"));
    }
    let lambda = cs.u_hat.norm() * cs.phi_hat.signum() / denom;
    let z = cs.u + m * (cs.phi_hat / (lambda * sp));
    let zeta = -w * lambda;
    Ok((Covector { z, zeta }, lambda))
}

/// Branch of the restricted canonical relation, i.e. the sign of `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSign {
    Positive,
    Negative,
}

impl LambdaSign {
    fn value(self) -> f64 {
        match self {
            LambdaSign::Positive => 1.0,
            LambdaSign::Negative => -1.0,
        }
    }
}

/// A point of the restricted canonical relation (curve vertex, fixed `phi0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestrictedPoint {
    pub t: f64,
    pub u: Vec3,
    pub u_prime: Vec3,
    pub beta: Vec3,
    pub beta_chart: DirectionChart,
    pub phi0: f64,
    pub u_hat: f64,
    pub beta_hat: Vec2,
    pub z: Vec3,
    pub zeta: Vec3,
    pub lambda: f64,
}

const CURVE_SCAN: usize = 1024;

/// Parameters `t` with `(z - u(t)) . zeta = 0` and `u'(t) . zeta != 0`.
pub fn curve_roots(curve: &Curve, cv: &Covector, n_scan: usize) -> Vec<f64> {
    let (t0, t1) = curve.param_range();
    let g = |t: f64| (cv.z - curve.point(t)).dot(&cv.zeta);
    let transversal = |t: f64| {
        let d = curve.tangent(t);
        d.dot(&cv.zeta).abs() > 1e-12 * d.norm() * cv.zeta.norm()
    };
    let dt = (t1 - t0) / n_scan as f64;
    let mut roots: Vec<f64> = Vec::new();
    for i in 0..n_scan {
        let a = t0 + i as f64 * dt;
        let b = if i + 1 == n_scan { t1 } else { a + dt };
        let (ga, gb) = (g(a), g(b));
        let root = if ga == 0.0 {
            Some(a)
        } else if ga * gb < 0.0 {
            let (mut lo, mut hi, mut glo) = (a, b, ga);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let gm = g(mid);
                if gm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if (gm < 0.0) == (glo < 0.0) {
                    lo = mid;
                    glo = gm;
                } else {
                    hi = mid;
                }
            }
            Some(0.5 * (lo + hi))
        } else {
            None
        };
        if let Some(r) = root {
            if transversal(r) {
                roots.push(r);
            }
        }
    }
    if !curve.is_closed() && g(t1) == 0.0 && transversal(t1) {
        roots.push(t1);
    }
    roots
}

/// Restricted canonical point over `(z, zeta)` at vertex parameter `t`.
pub fn restricted_point(curve: &Curve, t: f64, cv: &Covector, phi0: f64, sign: LambdaSign) -> Result<RestrictedPoint> {
    let u = curve.point(t);
    let u_prime = curve.tangent(t);
    let d = cv.z - u;
    let dist = d.norm();
    let m = d / dist;
    let zn = cv.zeta.norm();
    let (sp, cp) = phi0.sin_cos();
    let s = sign.value();
    let beta = m * cp - cv.zeta * (s * sp / zn);
    let lambda = s * zn / sp;
    let beta_chart = DirectionChart::for_direction(&beta, POLE_THRESHOLD);
    let j2 = beta_chart.jacobian(POLE_THRESHOLD)?;
    Ok(RestrictedPoint {
        t,
        u,
        u_prime,
        beta,
        beta_chart,
        phi0,
        u_hat: u_prime.dot(&cv.zeta),
        beta_hat: j2.transpose() * d * lambda,
        z: cv.z,
        zeta: cv.zeta,
        lambda,
    })
}

/// All restricted canonical points over `(z, zeta)` on the positive branch.
pub fn restricted_sample(curve: &Curve, cv: &Covector, phi0: f64) -> Result<Vec<RestrictedPoint>> {
    let roots = curve_roots(curve, cv, CURVE_SCAN);
    if roots.is_empty() {
        return Err(MicrolocalError::NotAccessible);
    }
    roots.into_iter().map(|t| restricted_point(curve, t, cv, phi0, LambdaSign::Positive)).collect()
}

/// Recovers `(z, zeta, lambda)` on a chosen branch from
/// `lambda |z - u| sin phi0 = |(beta_hat_1, beta_hat_2 / sin theta)|` and
/// `lambda = -u_hat / (u' . (beta - m cos phi0))`.
pub fn restricted_recover_signed(
    u: &Vec3,
    u_prime: &Vec3,
    beta_chart: &DirectionChart,
    u_hat: f64,
    beta_hat: &Vec2,
    phi0: f64,
    sign: LambdaSign,
) -> Result<(Covector, f64)> {
    if u_hat == 0.0 {
        return Err(MicrolocalError::InaccessibleInput("u_hat vanishes"));
    }
    beta_chart.jacobian(POLE_THRESHOLD)?;
    let (beta, b1, b2) = beta_chart.frame();
    let st = beta_chart.theta.sin();
    let (sp, cp) = phi0.sin_cos();
    let perp = b1 * beta_hat[0] + b2 * (beta_hat[1] / st);
    let pn = perp.norm();
    if pn == 0.0 {
        return Err(MicrolocalError::InaccessibleInput("beta_hat vanishes"));
    }
    let s = sign.value();
    let m = beta * cp + perp * (s * sp / pn);
    let w = beta - m * cp;
    let denom = u_prime.dot(&w);
    if denom == 0.0 {
        return Err(MicrolocalError::InaccessibleInput("u' . (beta - m cos phi0) vanishes"));
    }
    let lambda = -u_hat / denom;
    if lambda.signum() != s {
        return Err(MicrolocalError::InaccessibleInput("no solution on the requested branch"));
    }
    let z = u + m * (pn / (lambda.abs() * sp));
    Ok((Covector { z, zeta: -w * lambda }, lambda))
}

/// Restricted recovery on the `lambda > 0` branch, falling back to the
/// negative branch when the positive one is inconsistent.
pub fn restricted_recover(
    u: &Vec3,
    u_prime: &Vec3,
    beta_chart: &DirectionChart,
    u_hat: f64,
    beta_hat: &Vec2,
    phi0: f64,
) -> Result<(Covector, f64)> {
    restricted_recover_signed(u, u_prime, beta_chart, u_hat, beta_hat, phi0, LambdaSign::Positive).or_else(|e| {
        match e {
            MicrolocalError::InaccessibleInput("no solution on the requested branch") => {
                restricted_recover_signed(u, u_prime, beta_chart, u_hat, beta_hat, phi0, LambdaSign::Negative)
            }
            other => Err(other),
        }
    })
}

/// Sampling density used by [`visibility_map`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityOptions {
    pub n_dir: usize,
    pub n_u: usize,
    pub n_phi: usize,
    pub eps: f64,
}

impl VisibilityOptions {
    pub fn new(n_dir: usize) -> Self {
        VisibilityOptions { n_dir, n_u: 8, n_phi: 6, eps: 0.0 }
    }
}

/// Visibility of one covector: accessible and weighted by some conormal cone.
pub fn covector_visible(surface: &DetectorSurface, cv: &Covector, w: &WeightSpec, opts: &VisibilityOptions) -> Result<bool> {
    if !is_accessible(surface, cv) {
        return Ok(false);
    }
    let cones: Vec<Cone> = match surface {
        DetectorSurface::Curve(c) => {
            // vertices on a curve: every opening angle sample with the positive branch
            let mut out = Vec::new();
            for t in curve_roots(c, cv, CURVE_SCAN) {
                for phi in phi_samples(opts.n_phi, opts.eps) {
                    let p = restricted_point(c, t, cv, phi, LambdaSign::Positive)?;
                    out.push(Cone { vertex: p.u, axis: p.beta, opening: phi });
                }
            }
            out
        }
        _ => match canonical_sample(surface, cv, opts.n_u, opts.n_phi, opts.eps) {
            Ok(pts) => pts.iter().map(|p| p.as_cone()).collect(),
            Err(MicrolocalError::NotAccessible) => return Ok(false),
            Err(e) => return Err(e),
        },
    };
    match weight_nonvanishing_on(w, &cones, &cv.z) {
        Ok(v) => Ok(v),
        Err(WeightError::EmptyConeSet) => Ok(false),
        Err(e) => Err(e.into()),
    }
}

/// Visibility of `volume.len() x dirs.len()` covectors, row-major by voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilitySymbol {
    pub volume: VolumeSpec,
    /// Hemisphere directions; `zeta` and `-zeta` share a column.
    pub dirs: Vec<Vec3>,
    pub visible: Vec<bool>,
}

impl VisibilitySymbol {
    pub fn row(&self, voxel: usize) -> &[bool] {
        let n = self.dirs.len();
        &self.visible[voxel * n..(voxel + 1) * n]
    }

    /// Per-voxel fraction of visible directions.
    pub fn fraction_map(&self) -> VolumeGrid {
        let n = self.dirs.len() as f64;
        let values = (0..self.volume.len())
            .map(|v| self.row(v).iter().filter(|&&b| b).count() as f64 / n)
            .collect();
        VolumeGrid { spec: self.volume, values }
    }

    /// Column of the sampled direction nearest to `+-xi`.
    fn nearest(&self, xi: &Vec3) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, d) in self.dirs.iter().enumerate() {
            let c = d.dot(xi).abs();
            if c > best.1 {
                best = (i, c);
            }
        }
        best.0
    }

    /// Phase-space restriction to the visible set: the operator with symbol
    /// `1` where `(z, xi)` is visible and `0` elsewhere,
    /// `P f(z) = sum_xi vis(z, xi) f_hat(xi) exp(i xi . z)`, on the periodized
    /// grid. The zero frequency is kept. Cost is `O(len^2)`.
    pub fn filter(&self, f: &VolumeGrid) -> Result<VolumeGrid> {
        if f.spec != self.volume {
            return Err(MicrolocalError::InvalidInput(format!(
                "volume dims {:?} differ from the symbol's {:?}",
                f.spec.dims, self.volume.dims
            )));
        }
        let [nx, ny, nz] = self.volume.dims;
        let h = self.volume.spacing;
        let mut hat: Vec<Complex<f64>> = f.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft_nd(&mut hat, &self.volume.dims, false);
        let n = hat.len() as f64;
        // (bin, column) of every nonzero frequency; `usize::MAX` marks the zero bin
        let mut bins = Vec::with_capacity(hat.len());
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let xi = Vec3::new(wavenumber(i, nx, h), wavenumber(j, ny, h), wavenumber(k, nz, h));
                    let col = if xi == Vec3::zeros() { usize::MAX } else { self.nearest(&xi) };
                    bins.push(([i, j, k], col));
                }
            }
        }
        let phases = |m: usize| -> Vec<Vec<Complex<f64>>> {
            (0..m)
                .map(|a| (0..m).map(|p| Complex::from_polar(1.0, TAU * ((a * p) % m) as f64 / m as f64)).collect())
                .collect()
        };
        let (px, py, pz) = (phases(nx), phases(ny), phases(nz));
        let values = (0..f.values.len())
            .into_par_iter()
            .map(|v| {
                let (a, b, c) = (v / (ny * nz), (v / nz) % ny, v % nz);
                let row = self.row(v);
                let mut acc = Complex::new(0.0, 0.0);
                for (coef, ([i, j, k], col)) in hat.iter().zip(&bins) {
                    if *col == usize::MAX || row[*col] {
                        acc += coef * px[*i][a] * py[*j][b] * pz[*k][c];
                    }
                }
                acc.re / n
            })
            .collect();
        Ok(VolumeGrid { spec: self.volume, values })
    }
}

/// Classifies every voxel of `volume` against `opts.n_dir` hemisphere
/// directions: visible means accessible and carrying nonvanishing weight.
pub fn visibility_symbol(
    surface: &DetectorSurface,
    volume: &VolumeSpec,
    w: &WeightSpec,
    opts: &VisibilityOptions,
) -> Result<VisibilitySymbol> {
    if opts.n_dir < 16 {
        return Err(MicrolocalError::InvalidInput(format!("n_dir = {} < 16", opts.n_dir)));
    }
    let dirs = fibonacci_hemisphere(opts.n_dir);
    let rows = (0..volume.len())
        .into_par_iter()
        .map(|idx| {
            let z = volume.node_of(idx);
            dirs.iter()
                .map(|d| covector_visible(surface, &Covector { z, zeta: *d }, w, opts))
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VisibilitySymbol { volume: *volume, dirs, visible: rows.concat() })
}

/// Per-voxel fraction of hemisphere directions that are accessible and carry
/// nonvanishing weight.
pub fn visibility_map(
    surface: &DetectorSurface,
    volume: &VolumeSpec,
    w: &WeightSpec,
    opts: &VisibilityOptions,
) -> Result<VolumeGrid> {
    Ok(visibility_symbol(surface, volume, w, opts)?.fraction_map())
}
