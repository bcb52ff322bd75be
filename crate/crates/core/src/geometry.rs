//! Detector surfaces, their charts, cone frames and the Jacobians used by the
//! canonical relation.
//!
//! Conventions:
//! - Vertex charts map two parameters to a point of the detector surface. The
//!   Jacobian `J1 = (r1, r2)` holds the partial derivatives as columns.
//! - Direction charts parameterize `beta` on the unit sphere by `(theta, psi)`.
//!   The standard chart is `beta = (sin t cos p, sin t sin p, cos t)`; the rotated
//!   chart applies the cyclic permutation `(a, b, c) -> (c, a, b)` to it, which
//!   moves its poles to `(+-1, 0, 0)`. In both charts `beta_1 = d beta / d theta`
//!   and `beta_2 = (1 / sin theta) d beta / d psi`, expressed in world
//!   coordinates, so the frame orientation is inherited from the chart
//!   parameters.

use nalgebra::{Matrix3x2, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat32 = Matrix3x2<f64>;

/// Default switch-over between the two direction charts (`|cos theta|`).
pub const POLE_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("parameters ({0}, {1}) lie outside the {2} chart domain")]
    OutOfChart(f64, f64, &'static str),
    #[error("direction chart is degenerate at this point (|cos theta| = {0:.6}); switch charts")]
    PoleDegenerate(f64),
    #[error("invalid detector surface: {0}")]
    InvalidSurface(String),
    #[error("detector point ({0:.4}, {1:.4}, {2:.4}) lies inside the volume domain")]
    VertexInVolume(f64, f64, f64),
    #[error("invalid cone: {0}")]
    InvalidCone(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Axis-aligned box, used for the volume domain `M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Radius of the smallest ball around `center()` containing the box.
    pub fn circumradius(&self) -> f64 {
        ((self.max - self.min) * 0.5).norm()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Euclidean distance from `p` to the closed box (zero inside).
    pub fn distance(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let e = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d2 += e * e;
        }
        d2.sqrt()
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (k, c) in out.iter_mut().enumerate() {
            for i in 0..3 {
                c[i] = if (k >> i) & 1 == 0 { self.min[i] } else { self.max[i] };
            }
        }
        out
    }
}

/// Orthonormal completion `(e1, e2)` of a unit axis `beta`.
///
/// The coordinate axis where `beta` has its smallest absolute component (first
/// one on ties) is Gram-Schmidt projected to give `e1`; `e2 = beta x e1`.
pub fn cone_frame(beta: &Vec3) -> (Vec3, Vec3) {
    let mut pivot = 0;
    for i in 1..3 {
        if beta[i].abs() < beta[pivot].abs() {
            pivot = i;
        }
    }
    let mut a = Vec3::zeros();
    a[pivot] = 1.0;
    let e1 = (a - beta * beta[pivot]).normalize();
    let e2 = beta.cross(&e1);
    (e1, e2)
}

/// A circular cone with vertex `u`, unit axis `beta` and opening angle `phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cone {
    pub vertex: Vec3,
    pub axis: Vec3,
    pub opening: f64,
}

impl Cone {
    /// Normalizes the axis; rejects a zero axis or an opening angle outside
    /// `[eps, pi/2 - eps]`.
    pub fn new(vertex: Vec3, axis: Vec3, opening: f64, eps: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(GeometryError::InvalidCone("axis must be a nonzero vector".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_4).contains(&eps) {
            return Err(GeometryError::InvalidCone(format!("eps = {eps} outside [0, pi/4)")));
        }
        if !(opening >= eps && opening <= std::f64::consts::FRAC_PI_2 - eps) {
            return Err(GeometryError::InvalidCone(format!(
                "opening angle {opening} outside [{eps}, pi/2 - {eps}]"
            )));
        }
        Ok(Cone { vertex, axis: axis / n, opening })
    }

    pub fn frame(&self) -> (Vec3, Vec3) {
        cone_frame(&self.axis)
    }

    /// `z = u + r (cos phi beta + sin phi (cos a e1 + sin a e2))`.
    pub fn surface_point(&self, r: f64, alpha: f64) -> Vec3 {
        let (e1, e2) = self.frame();
        let (sp, cp) = self.opening.sin_cos();
        let (sa, ca) = alpha.sin_cos();
        self.vertex + (self.axis * cp + (e1 * ca + e2 * sa) * sp) * r
    }

    /// The phase `(z - u) . beta - |z - u| cos phi`; zero exactly on the cone.
    pub fn phase(&self, z: &Vec3) -> f64 {
        let d = z - self.vertex;
        d.dot(&self.axis) - d.norm() * self.opening.cos()
    }
}

/// Which direction chart a `(theta, psi)` pair refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DirectionChartKind {
    Standard,
    Rotated,
}

#[inline]
fn rotate(v: Vec3) -> Vec3 {
    Vec3::new(v[2], v[0], v[1])
}

#[inline]
fn unrotate(v: Vec3) -> Vec3 {
    Vec3::new(v[1], v[2], v[0])
}

/// Spherical coordinates of a direction in one of the two charts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionChart {
    pub kind: DirectionChartKind,
    pub theta: f64,
    pub psi: f64,
}

impl DirectionChart {
    pub fn new(kind: DirectionChartKind, theta: f64, psi: f64) -> Self {
        DirectionChart { kind, theta, psi }
    }

    /// Chart coordinates of a unit vector. Uses the rotated chart when the
    /// standard chart would have `|cos theta| > pole_threshold`.
    pub fn for_direction(beta: &Vec3, pole_threshold: f64) -> Self {
        let b = beta.normalize();
        let (kind, local) = if b[2].abs() > pole_threshold {
            (DirectionChartKind::Rotated, unrotate(b))
        } else {
            (DirectionChartKind::Standard, b)
        };
        let theta = local[2].clamp(-1.0, 1.0).acos();
        let mut psi = local[1].atan2(local[0]);
        if psi < 0.0 {
            psi += 2.0 * std::f64::consts::PI;
        }
        DirectionChart { kind, theta, psi }
    }

    fn to_world(&self, v: Vec3) -> Vec3 {
        match self.kind {
            DirectionChartKind::Standard => v,
            DirectionChartKind::Rotated => rotate(v),
        }
    }

    pub fn beta(&self) -> Vec3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.psi.sin_cos();
        self.to_world(Vec3::new(st * cp, st * sp, ct))
    }

    /// `(beta, beta_1, beta_2)`, an orthonormal triple.
    pub fn frame(&self) -> (Vec3, Vec3, Vec3) {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.psi.sin_cos();
        (
            self.to_world(Vec3::new(st * cp, st * sp, ct)),
            self.to_world(Vec3::new(ct * cp, ct * sp, -st)),
            self.to_world(Vec3::new(-sp, cp, 0.0)),
        )
    }

    /// `J2 = (beta_1, sin theta beta_2)`.
    pub fn jacobian(&self, pole_threshold: f64) -> Result<Mat32> {
        let ct = self.theta.cos();
        if ct.abs() > pole_threshold {
            return Err(GeometryError::PoleDegenerate(ct.abs()));
        }
        let (_, b1, b2) = self.frame();
        Ok(Mat32::from_columns(&[b1, b2 * self.theta.sin()]))
    }
}

/// `J2` of a direction chart; see [`DirectionChart::jacobian`].
pub fn direction_jacobian(chart: &DirectionChart) -> Result<Mat32> {
    chart.jacobian(POLE_THRESHOLD)
}

/// Vertex charts offered by the detector surfaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VertexChart {
    /// `u = c + v1 e1 + v2 e2`, restricted to `v1^2 + v2^2 < R^2` for a disk.
    Plane,
    /// `u = c + rho (cos a e1 + sin a e2)`, `0 < rho < R`. Used for data grids.
    DiskPolar,
    /// Graph chart over the coordinate plane orthogonal to `axis`; the
    /// parameters are the two remaining coordinates of `u - c` in index order,
    /// the `axis` coordinate is `sign * sqrt(R^2 - p^2 - q^2)`.
    SphereGraph { axis: usize, positive: bool },
    /// `u = c + R (sin a cos b, sin a sin b, cos a)`, `0 < a < pi`. Used for data grids.
    SphereAngular,
}

impl VertexChart {
    pub fn name(&self) -> &'static str {
        match self {
            VertexChart::Plane => "plane",
            VertexChart::DiskPolar => "disk-polar",
            VertexChart::SphereGraph { .. } => "sphere-graph",
            VertexChart::SphereAngular => "sphere-angular",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneDisk {
    pub center: Vec3,
    pub normal: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
    /// `None` for the unbounded plane.
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

/// Natural cubic spline through 3-D samples, one spline per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline3 {
    t: Vec<f64>,
    p: Vec<Vec3>,
    m: Vec<Vec3>,
}

impl CubicSpline3 {
    pub fn new(t: Vec<f64>, p: Vec<Vec3>) -> Result<Self> {
        let n = t.len();
        if n < 3 || p.len() != n {
            return Err(GeometryError::InvalidSurface(
                "spline needs at least three samples with matching parameters".into(),
            ));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GeometryError::InvalidSurface(
                "spline parameters must be strictly increasing".into(),
            ));
        }
        // Thomas algorithm for the second derivatives, natural end conditions.
        let mut m = vec![Vec3::zeros(); n];
        let mut c_prime = vec![0.0; n];
        let mut d_prime = vec![Vec3::zeros(); n];
        for i in 1..n - 1 {
            let h0 = t[i] - t[i - 1];
            let h1 = t[i + 1] - t[i];
            let rhs = ((p[i + 1] - p[i]) / h1 - (p[i] - p[i - 1]) / h0) * 6.0;
            let diag = 2.0 * (h0 + h1);
            let denom = diag - h0 * c_prime[i - 1];
            c_prime[i] = h1 / denom;
            d_prime[i] = (rhs - d_prime[i - 1] * h0) / denom;
        }
        for i in (1..n - 1).rev() {
            m[i] = d_prime[i] - m[i + 1] * c_prime[i];
        }
        Ok(CubicSpline3 { t, p, m })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.t[0], *self.t.last().unwrap())
    }

    fn segment(&self, s: f64) -> usize {
        match self.t.binary_search_by(|x| x.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.t.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.t.len() - 2),
        }
    }

    pub fn point(&self, s: f64) -> Vec3 {
        let i = self.segment(s);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - s) / h;
        let b = (s - self.t[i]) / h;
        self.p[i] * a
            + self.p[i + 1] * b
            + (self.m[i] * (a * a * a - a) + self.m[i + 1] * (b * b * b - b)) * (h * h / 6.0)
    }

    pub fn derivative(&self, s: f64) -> Vec3 {
        let i = self.segment(s);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - s) / h;
        let b = (s - self.t[i]) / h;
        (self.p[i + 1] - self.p[i]) / h
            + (self.m[i + 1] * (3.0 * b * b - 1.0) - self.m[i] * (3.0 * a * a - 1.0)) * (h / 6.0)
    }
}

/// A smooth regular curve of vertices.
#[derive(Debug, Clone, PartialEq)]
pub enum Curve {
    /// `u(t) = c + R (cos t e1 + sin t e2)`, `t` in `[0, 2 pi)`.
    Circle { center: Vec3, normal: Vec3, e1: Vec3, e2: Vec3, radius: f64 },
    Spline(CubicSpline3),
}

impl Curve {
    pub fn circle(center: Vec3, normal: Vec3, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || normal.norm() == 0.0 {
            return Err(GeometryError::InvalidSurface("circle needs radius > 0 and a normal".into()));
        }
        let n = normal.normalize();
        let (e1, e2) = cone_frame(&n);
        Ok(Curve::Circle { center, normal: n, e1, e2, radius })
    }

    pub fn param_range(&self) -> (f64, f64) {
        match self {
            Curve::Circle { .. } => (0.0, 2.0 * std::f64::consts::PI),
            Curve::Spline(s) => s.range(),
        }
    }

    pub fn is_closed(&self) -> bool {
        matches!(self, Curve::Circle { .. })
    }

    pub fn point(&self, t: f64) -> Vec3 {
        match self {
            Curve::Circle { center, e1, e2, radius, .. } => {
                let (s, c) = t.sin_cos();
                center + (e1 * c + e2 * s) * *radius
            }
            Curve::Spline(s) => s.point(t),
        }
    }

    /// `u'(t)`.
    pub fn tangent(&self, t: f64) -> Vec3 {
        match self {
            Curve::Circle { e1, e2, radius, .. } => {
                let (s, c) = t.sin_cos();
                (e2 * c - e1 * s) * *radius
            }
            Curve::Spline(s) => s.derivative(t),
        }
    }
}

/// Surface (or curve) carrying the cone vertices.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectorSurface {
    PlaneDisk(PlaneDisk),
    Sphere(Sphere),
    Curve(Curve),
}

impl DetectorSurface {
    pub fn plane(center: Vec3, normal: Vec3) -> Result<Self> {
        Self::plane_disk(center, normal, None)
    }

    pub fn disk(center: Vec3, normal: Vec3, radius: f64) -> Result<Self> {
        Self::plane_disk(center, normal, Some(radius))
    }

    fn plane_disk(center: Vec3, normal: Vec3, radius: Option<f64>) -> Result<Self> {
        let n = normal.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(GeometryError::InvalidSurface("plane normal must be nonzero".into()));
        }
        if let Some(r) = radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(GeometryError::InvalidSurface(format!("disk radius {r} must be positive")));
            }
        }
        let normal = normal / n;
        let (e1, e2) = cone_frame(&normal);
        Ok(DetectorSurface::PlaneDisk(PlaneDisk { center, normal, e1, e2, radius }))
    }

    pub fn sphere(center: Vec3, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::InvalidSurface(format!("sphere radius {radius} must be positive")));
        }
        Ok(DetectorSurface::Sphere(Sphere { center, radius }))
    }

    pub fn circle(center: Vec3, normal: Vec3, radius: f64) -> Result<Self> {
        Ok(DetectorSurface::Curve(Curve::circle(center, normal, radius)?))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            DetectorSurface::PlaneDisk(p) if p.radius.is_some() => "disk",
            DetectorSurface::PlaneDisk(_) => "plane",
            DetectorSurface::Sphere(_) => "sphere",
            DetectorSurface::Curve(_) => "curve",
        }
    }

    /// Radius of a ball containing the surface, with its center; `None` for the
    /// unbounded plane.
    pub fn bounding_sphere(&self) -> Option<(Vec3, f64)> {
        match self {
            DetectorSurface::PlaneDisk(p) => p.radius.map(|r| (p.center, r)),
            DetectorSurface::Sphere(s) => Some((s.center, s.radius)),
            DetectorSurface::Curve(Curve::Circle { center, radius, .. }) => Some((*center, *radius)),
            DetectorSurface::Curve(Curve::Spline(s)) => {
                let c = s.p.iter().fold(Vec3::zeros(), |a, p| a + p) / s.p.len() as f64;
                let (t0, t1) = s.range();
                let n = 512;
                let r = (0..=n)
                    .map(|i| (s.point(t0 + (t1 - t0) * i as f64 / n as f64) - c).norm())
                    .fold(0.0, f64::max);
                Some((c, r * 1.01))
            }
        }
    }

    /// Point of a two-parameter chart.
    pub fn chart_point(&self, chart: VertexChart, v: [f64; 2]) -> Result<Vec3> {
        match (self, chart) {
            (DetectorSurface::PlaneDisk(p), VertexChart::Plane) => {
                if let Some(r) = p.radius {
                    if v[0] * v[0] + v[1] * v[1] >= r * r {
                        return Err(GeometryError::OutOfChart(v[0], v[1], "disk"));
                    }
                }
                Ok(p.center + p.e1 * v[0] + p.e2 * v[1])
            }
            (DetectorSurface::PlaneDisk(p), VertexChart::DiskPolar) => {
                let r = p.radius.ok_or(GeometryError::OutOfChart(v[0], v[1], "disk-polar"))?;
                if !(v[0] > 0.0 && v[0] < r) {
                    return Err(GeometryError::OutOfChart(v[0], v[1], "disk-polar"));
                }
                let (s, c) = v[1].sin_cos();
                Ok(p.center + (p.e1 * c + p.e2 * s) * v[0])
            }
            (DetectorSurface::Sphere(s), VertexChart::SphereGraph { axis, positive }) => {
                let h2 = s.radius * s.radius - v[0] * v[0] - v[1] * v[1];
                if !(h2 > 0.0) || axis > 2 {
                    return Err(GeometryError::OutOfChart(v[0], v[1], "sphere-graph"));
                }
                let h = if positive { h2.sqrt() } else { -h2.sqrt() };
                let (i, j) = other_axes(axis);
                let mut d = Vec3::zeros();
                d[i] = v[0];
                d[j] = v[1];
                d[axis] = h;
                Ok(s.center + d)
            }
            (DetectorSurface::Sphere(s), VertexChart::SphereAngular) => {
                if !(v[0] > 0.0 && v[0] < std::f64::consts::PI) {
                    return Err(GeometryError::OutOfChart(v[0], v[1], "sphere-angular"));
                }
                let (sa, ca) = v[0].sin_cos();
                let (sb, cb) = v[1].sin_cos();
                Ok(s.center + Vec3::new(sa * cb, sa * sb, ca) * s.radius)
            }
            _ => Err(GeometryError::OutOfChart(v[0], v[1], chart.name())),
        }
    }

    /// `J1 = (du/dv1, du/dv2)`; see [`chart_jacobians`].
    pub fn chart_jacobian(&self, chart: VertexChart, v: [f64; 2]) -> Result<Mat32> {
        // Validates the domain.
        self.chart_point(chart, v)?;
        match (self, chart) {
            (DetectorSurface::PlaneDisk(p), VertexChart::Plane) => Ok(Mat32::from_columns(&[p.e1, p.e2])),
            (DetectorSurface::PlaneDisk(p), VertexChart::DiskPolar) => {
                let (s, c) = v[1].sin_cos();
                Ok(Mat32::from_columns(&[p.e1 * c + p.e2 * s, (p.e2 * c - p.e1 * s) * v[0]]))
            }
            (DetectorSurface::Sphere(s), VertexChart::SphereGraph { axis, positive }) => {
                let h2 = s.radius * s.radius - v[0] * v[0] - v[1] * v[1];
                let h = if positive { h2.sqrt() } else { -h2.sqrt() };
                let (i, j) = other_axes(axis);
                let mut r1 = Vec3::zeros();
                let mut r2 = Vec3::zeros();
                r1[i] = 1.0;
                r1[axis] = -v[0] / h;
                r2[j] = 1.0;
                r2[axis] = -v[1] / h;
                Ok(Mat32::from_columns(&[r1, r2]))
            }
            (DetectorSurface::Sphere(s), VertexChart::SphereAngular) => {
                let (sa, ca) = v[0].sin_cos();
                let (sb, cb) = v[1].sin_cos();
                Ok(Mat32::from_columns(&[
                    Vec3::new(ca * cb, ca * sb, -sa) * s.radius,
                    Vec3::new(-sa * sb, sa * cb, 0.0) * s.radius,
                ]))
            }
            _ => Err(GeometryError::OutOfChart(v[0], v[1], chart.name())),
        }
    }

    /// Preferred graph-type chart and its parameters for a point on the surface.
    /// Plane and disk use the plane chart; the sphere uses the graph chart over
    /// the coordinate axis where `u - c` has its largest component.
    pub fn chart_for_point(&self, u: &Vec3) -> Result<(VertexChart, [f64; 2])> {
        match self {
            DetectorSurface::PlaneDisk(p) => {
                let d = u - p.center;
                Ok((VertexChart::Plane, [d.dot(&p.e1), d.dot(&p.e2)]))
            }
            DetectorSurface::Sphere(s) => {
                let d = u - s.center;
                let mut axis = 0;
                for k in 1..3 {
                    if d[k].abs() > d[axis].abs() {
                        axis = k;
                    }
                }
                let (i, j) = other_axes(axis);
                Ok((VertexChart::SphereGraph { axis, positive: d[axis] >= 0.0 }, [d[i], d[j]]))
            }
            DetectorSurface::Curve(_) => Err(GeometryError::InvalidSurface(
                "curve vertices have a one-parameter chart".into(),
            )),
        }
    }

    /// Outward (or `+normal`) unit normal at a surface point; `None` for curves.
    pub fn normal_at(&self, u: &Vec3) -> Option<Vec3> {
        match self {
            DetectorSurface::PlaneDisk(p) => Some(p.normal),
            DetectorSurface::Sphere(s) => Some((u - s.center).normalize()),
            DetectorSurface::Curve(_) => None,
        }
    }

    /// Checks that none of the given detector points lie in the closed volume box.
    pub fn check_separation<'a>(&self, volume: &Aabb, points: impl IntoIterator<Item = &'a Vec3>) -> Result<()> {
        for p in points {
            if volume.distance(p) <= 0.0 {
                return Err(GeometryError::VertexInVolume(p[0], p[1], p[2]));
            }
        }
        Ok(())
    }
}

/// `J1` and its columns `(r1, r2)` for a chart point.
pub fn chart_jacobians(surface: &DetectorSurface, chart: VertexChart, v: [f64; 2]) -> Result<(Mat32, Vec3, Vec3)> {
    let j = surface.chart_jacobian(chart, v)?;
    let r1 = j.column(0).into_owned();
    let r2 = j.column(1).into_owned();
    Ok((j, r1, r2))
}

pub(crate) fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n < 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn frame_of_z_axis_is_xy() {
        let (e1, e2) = cone_frame(&Vec3::z());
        assert_eq!(e1, Vec3::x());
        assert_eq!(e2, Vec3::y());
    }

    #[test]
    fn frame_of_x_axis_is_right_handed() {
        let b = Vec3::x();
        let (e1, e2) = cone_frame(&b);
        assert!(e1.dot(&b).abs() < 1e-15 && e2.dot(&b).abs() < 1e-15);
        assert!((e1.cross(&e2).dot(&b).abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_frames_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let b = random_unit(&mut rng);
            let (e1, e2) = cone_frame(&b);
            let basis = [b, e1, e2];
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((basis[i].dot(&basis[j]) - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn surface_point_hand_case() {
        let cone = Cone::new(Vec3::zeros(), Vec3::z(), FRAC_PI_4, 0.0).unwrap();
        let z = cone.surface_point(1.0, 0.0);
        let h = 2f64.sqrt() / 2.0;
        assert!((z - Vec3::new(h, 0.0, h)).norm() < 1e-15);
    }

    #[test]
    fn surface_points_lie_on_cone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let u = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let phi = rng.gen_range(0.05..FRAC_PI_2 - 0.05);
            let cone = Cone::new(u, random_unit(&mut rng), phi, 0.0).unwrap();
            let r = rng.gen_range(0.01..5.0);
            let z = cone.surface_point(r, rng.gen_range(0.0..2.0 * PI));
            assert!(cone.phase(&z).abs() < 1e-13, "phase residual {}", cone.phase(&z));
            assert!(((z - u).norm() - r).abs() < 1e-13);
        }
    }

    #[test]
    fn alpha_sweep_keeps_distance() {
        let cone = Cone::new(Vec3::new(0.3, -1.0, 2.0), Vec3::new(1.0, 2.0, -0.5), 0.7, 0.0).unwrap();
        for k in 0..64 {
            let z = cone.surface_point(1.7, 2.0 * PI * k as f64 / 64.0);
            assert!(((z - cone.vertex).norm() - 1.7).abs() < 1e-14);
        }
    }

    #[test]
    fn cone_rejects_bad_input() {
        assert!(Cone::new(Vec3::zeros(), Vec3::zeros(), 0.5, 0.0).is_err());
        assert!(Cone::new(Vec3::zeros(), Vec3::z(), 0.01, 0.05).is_err());
        assert!(Cone::new(Vec3::zeros(), Vec3::z(), 1.56, 0.05).is_err());
    }

    #[test]
    fn plane_chart_jacobian_is_identity() {
        let s = DetectorSurface::plane(Vec3::zeros(), Vec3::z()).unwrap();
        let (j, _, _) = chart_jacobians(&s, VertexChart::Plane, [0.3, -2.0]).unwrap();
        assert_eq!(j, Mat32::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn unit_sphere_graph_chart_at_origin() {
        let s = DetectorSurface::sphere(Vec3::zeros(), 1.0).unwrap();
        let chart = VertexChart::SphereGraph { axis: 1, positive: true };
        assert!((s.chart_point(chart, [0.0, 0.0]).unwrap() - Vec3::y()).norm() < 1e-15);
        let (_, r1, r3) = chart_jacobians(&s, chart, [0.0, 0.0]).unwrap();
        assert!((r1 - Vec3::x()).norm() < 1e-15);
        assert!((r3 - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn disk_chart_boundary_is_open() {
        let s = DetectorSurface::disk(Vec3::zeros(), Vec3::z(), 1.0).unwrap();
        assert!(s.chart_point(VertexChart::Plane, [1.0, 0.0]).is_err());
        assert!(matches!(
            s.chart_jacobian(VertexChart::Plane, [0.8, 0.8]),
            Err(GeometryError::OutOfChart(..))
        ));
        assert!(s.chart_point(VertexChart::Plane, [0.999, 0.0]).is_ok());
    }

    fn fd_check(s: &DetectorSurface, chart: VertexChart, v: [f64; 2]) {
        let j = s.chart_jacobian(chart, v).unwrap();
        let h = 1e-6;
        for c in 0..2 {
            let mut vp = v;
            let mut vm = v;
            vp[c] += h;
            vm[c] -= h;
            let fd = (s.chart_point(chart, vp).unwrap() - s.chart_point(chart, vm).unwrap()) / (2.0 * h);
            let col = j.column(c).into_owned();
            let rel = (fd - col).norm() / col.norm();
            assert!(rel < 1e-7, "{chart:?} column {c}: rel err {rel}");
        }
    }

    #[test]
    fn chart_jacobians_match_finite_differences() {
        let sphere = DetectorSurface::sphere(Vec3::new(0.1, -0.2, 0.3), 1.7).unwrap();
        let disk = DetectorSurface::disk(Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.2, 0.1, 1.0), 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let axis = rng.gen_range(0..3);
            let positive = rng.gen_bool(0.5);
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            fd_check(&sphere, VertexChart::SphereGraph { axis, positive }, p);
            fd_check(&sphere, VertexChart::SphereAngular, [rng.gen_range(0.2..2.9), rng.gen_range(0.0..6.2)]);
            fd_check(&disk, VertexChart::Plane, [rng.gen_range(-1.3..1.3), rng.gen_range(-1.3..1.3)]);
            fd_check(&disk, VertexChart::DiskPolar, [rng.gen_range(0.1..1.9), rng.gen_range(0.0..6.2)]);
        }
    }

    #[test]
    fn direction_chart_equator_case() {
        let c = DirectionChart::new(DirectionChartKind::Standard, FRAC_PI_2, 0.0);
        let (b, b1, b2) = c.frame();
        assert!((b - Vec3::x()).norm() < 1e-15);
        assert!((b1 - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        assert!((b2 - Vec3::y()).norm() < 1e-15);
    }

    #[test]
    fn direction_frames_orthonormal_and_jt_beta_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let beta = random_unit(&mut rng);
            let c = DirectionChart::for_direction(&beta, POLE_THRESHOLD);
            assert!((c.beta() - beta).norm() < 1e-13);
            let (b, b1, b2) = c.frame();
            for (x, y) in [(b, b1), (b, b2), (b1, b2)] {
                assert!(x.dot(&y).abs() < 1e-13);
            }
            for x in [b, b1, b2] {
                assert!((x.norm() - 1.0).abs() < 1e-13);
            }
            let j = direction_jacobian(&c).unwrap();
            assert!((j.transpose() * b).norm() < 1e-13);
        }
    }

    #[test]
    fn direction_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for kind in [DirectionChartKind::Standard, DirectionChartKind::Rotated] {
            for _ in 0..200 {
                let c = DirectionChart::new(kind, rng.gen_range(0.5..2.6), rng.gen_range(0.0..6.28));
                let j = direction_jacobian(&c).unwrap();
                let dt = (DirectionChart::new(kind, c.theta + h, c.psi).beta()
                    - DirectionChart::new(kind, c.theta - h, c.psi).beta())
                    / (2.0 * h);
                let dp = (DirectionChart::new(kind, c.theta, c.psi + h).beta()
                    - DirectionChart::new(kind, c.theta, c.psi - h).beta())
                    / (2.0 * h);
                assert!((dt - j.column(0)).norm() / dt.norm() < 1e-7);
                assert!((dp - j.column(1)).norm() / dp.norm() < 1e-7);
            }
        }
    }

    #[test]
    fn pole_is_degenerate_in_standard_chart() {
        let c = DirectionChart::new(DirectionChartKind::Standard, 0.05, 1.0);
        assert!(matches!(direction_jacobian(&c), Err(GeometryError::PoleDegenerate(_))));
        let switched = DirectionChart::for_direction(&c.beta(), POLE_THRESHOLD);
        assert_eq!(switched.kind, DirectionChartKind::Rotated);
        assert!(direction_jacobian(&switched).is_ok());
    }

    #[test]
    fn sphere_chart_transitions_agree() {
        let s = DetectorSurface::sphere(Vec3::new(0.5, 0.0, -0.25), 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..2000 {
            let a = rng.gen_range(0.3..2.8);
            let b = rng.gen_range(0.0..6.28);
            let u = s.chart_point(VertexChart::SphereAngular, [a, b]).unwrap();
            let d = u - Vec3::new(0.5, 0.0, -0.25);
            for axis in 0..3 {
                if d[axis].abs() < 0.2 {
                    continue;
                }
                let (i, j) = other_axes(axis);
                let chart = VertexChart::SphereGraph { axis, positive: d[axis] > 0.0 };
                let ug = s.chart_point(chart, [d[i], d[j]]).unwrap();
                assert!((ug - u).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn spline_reproduces_circle() {
        let n = 65;
        let t: Vec<f64> = (0..n).map(|i| 2.0 * PI * i as f64 / (n - 1) as f64).collect();
        let p: Vec<Vec3> = t.iter().map(|&s| Vec3::new(s.cos(), s.sin(), 0.0)).collect();
        let sp = CubicSpline3::new(t, p).unwrap();
        for k in 0..100 {
            let s = 0.5 + 5.0 * k as f64 / 100.0;
            assert!((sp.point(s) - Vec3::new(s.cos(), s.sin(), 0.0)).norm() < 1e-5);
            assert!((sp.derivative(s) - Vec3::new(-s.sin(), s.cos(), 0.0)).norm() < 1e-3);
        }
    }

    #[test]
    fn separation_check_flags_inside_points() {
        let bx = Aabb::new(Vec3::repeat(-0.5), Vec3::repeat(0.5));
        let s = DetectorSurface::sphere(Vec3::zeros(), 1.0).unwrap();
        assert!(s.check_separation(&bx, &[Vec3::new(1.0, 0.0, 0.0)]).is_ok());
        assert!(matches!(
            s.check_separation(&bx, &[Vec3::new(0.5, 0.0, 0.0)]),
            Err(GeometryError::VertexInVolume(..))
        ));
    }
}
