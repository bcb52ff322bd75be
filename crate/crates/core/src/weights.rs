//! The smooth weight `kappa(u, beta, phi, z)`.
//!
//! `kappa = a * base(|z - u|) * window(phi) * chi1(z) * chi2(u, phi)`, where
//! every cutoff is a plateau function with a quintic smoothstep taper, so it
//! is C2 and compactly supported.

use crate::geometry::{Aabb, Cone, Vec3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("vertex is {0:.3e} from the volume point, below the minimum separation {1:.3e}")]
    VertexInVolume(f64, f64),
    #[error("cone set is empty; the covector is not accessible")]
    EmptyConeSet,
    #[error("invalid weight: {0}")]
    Invalid(String),
}

/// Quintic smoothstep `6x^5 - 15x^4 + 10x^3` clamped to `[0, 1]`.
#[inline]
pub fn smoothstep5(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        x * x * x * (10.0 + x * (-15.0 + 6.0 * x))
    }
}

/// One on `[lo, hi]`, zero outside `[lo - taper, hi + taper]`.
#[inline]
pub fn plateau(x: f64, lo: f64, hi: f64, taper: f64) -> f64 {
    if x < lo {
        smoothstep5((x - (lo - taper)) / taper)
    } else if x > hi {
        smoothstep5((hi + taper - x) / taper)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightBase {
    Constant(f64),
    /// `a / |z - u|`.
    InverseDistance(f64),
}

impl WeightBase {
    pub fn amplitude(&self) -> f64 {
        match *self {
            WeightBase::Constant(a) | WeightBase::InverseDistance(a) => a,
        }
    }
}

/// Opening-angle window in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularWindow {
    pub lo: f64,
    pub hi: f64,
    pub taper: f64,
}

impl AngularWindow {
    /// `[5 deg, 75 deg]` with a 2 degree taper.
    pub fn compton_default() -> Self {
        AngularWindow { lo: 5f64.to_radians(), hi: 75f64.to_radians(), taper: 2f64.to_radians() }
    }

    pub fn eval(&self, phi: f64) -> f64 {
        plateau(phi, self.lo, self.hi, self.taper)
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo - self.taper, self.hi + self.taper)
    }
}

/// `chi1(z)`, a smooth bump over a ball or box of the volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpatialCutoff {
    Ball { center: Vec3, radius: f64, taper: f64 },
    Box { min: Vec3, max: Vec3, taper: f64 },
}

impl SpatialCutoff {
    #[inline]
    pub fn eval(&self, z: &Vec3) -> f64 {
        match self {
            SpatialCutoff::Ball { center, radius, taper } => {
                let d = (z - center).norm();
                plateau(d, -1.0, *radius, *taper)
            }
            SpatialCutoff::Box { min, max, taper } => {
                let mut v = 1.0;
                for i in 0..3 {
                    v *= plateau(z[i], min[i], max[i], *taper);
                    if v == 0.0 {
                        break;
                    }
                }
                v
            }
        }
    }

    /// Box outside which the cutoff vanishes.
    pub fn support_box(&self) -> Aabb {
        match self {
            SpatialCutoff::Ball { center, radius, taper } => {
                let r = radius + taper;
                Aabb::new(center - Vec3::repeat(r), center + Vec3::repeat(r))
            }
            SpatialCutoff::Box { min, max, taper } => Aabb::new(min - Vec3::repeat(*taper), max + Vec3::repeat(*taper)),
        }
    }

    /// Whether `z` is in the plateau region where the cutoff equals one.
    pub fn is_plateau(&self, z: &Vec3) -> bool {
        self.eval(z) >= 1.0
    }
}

/// `chi2(u, phi)`: a ball of vertices times an opening-angle interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeCutoff {
    pub vertex_center: Vec3,
    pub vertex_radius: f64,
    pub vertex_taper: f64,
    pub phi_lo: f64,
    pub phi_hi: f64,
    pub phi_taper: f64,
}

impl ConeCutoff {
    #[inline]
    pub fn eval(&self, u: &Vec3, phi: f64) -> f64 {
        let d = (u - self.vertex_center).norm();
        plateau(d, -1.0, self.vertex_radius, self.vertex_taper) * plateau(phi, self.phi_lo, self.phi_hi, self.phi_taper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSpec {
    pub base: WeightBase,
    pub window: Option<AngularWindow>,
    pub spatial: Option<SpatialCutoff>,
    pub cone: Option<ConeCutoff>,
    /// Smallest admissible `|z - u|`.
    pub min_separation: f64,
}

/// Nonvanishing floor, relative to the weight's amplitude scale.
pub const NONVANISHING_THRESHOLD: f64 = 1e-9;

impl WeightSpec {
    pub fn constant(a: f64) -> Self {
        WeightSpec { base: WeightBase::Constant(a), window: None, spatial: None, cone: None, min_separation: 1e-6 }
    }

    pub fn inverse_distance(a: f64) -> Self {
        WeightSpec { base: WeightBase::InverseDistance(a), ..Self::constant(a) }
    }

    pub fn with_window(mut self, w: AngularWindow) -> Self {
        self.window = Some(w);
        self
    }

    pub fn with_spatial(mut self, c: SpatialCutoff) -> Self {
        self.spatial = Some(c);
        self
    }

    pub fn with_cone_cutoff(mut self, c: ConeCutoff) -> Self {
        self.cone = Some(c);
        self
    }

    pub fn validate(&self, eps: f64) -> Result<(), WeightError> {
        if !self.base.amplitude().is_finite() {
            return Err(WeightError::Invalid("amplitude must be finite".into()));
        }
        if !(self.min_separation > 0.0) {
            return Err(WeightError::Invalid("min_separation must be positive".into()));
        }
        if let Some(w) = &self.window {
            if !(w.taper > 0.0) {
                return Err(WeightError::Invalid("window taper must be positive".into()));
            }
            let (lo, hi) = w.support();
            if !(eps < lo && w.lo < w.hi && hi < std::f64::consts::FRAC_PI_2 - eps) {
                return Err(WeightError::Invalid(format!(
                    "window support [{lo:.4}, {hi:.4}] must lie inside (eps, pi/2 - eps) with eps = {eps}"
                )));
            }
        }
        match &self.spatial {
            Some(SpatialCutoff::Ball { radius, taper, .. }) if !(*radius > 0.0 && *taper > 0.0) => {
                return Err(WeightError::Invalid("spatial cutoff needs radius > 0 and taper > 0".into()))
            }
            Some(SpatialCutoff::Box { min, max, taper }) if !(*taper > 0.0 && (0..3).all(|i| min[i] < max[i])) => {
                return Err(WeightError::Invalid("spatial box cutoff needs min < max and taper > 0".into()))
            }
            _ => {}
        }
        if let Some(c) = &self.cone {
            if !(c.vertex_radius > 0.0 && c.vertex_taper > 0.0 && c.phi_taper > 0.0 && c.phi_lo < c.phi_hi) {
                return Err(WeightError::Invalid("cone cutoff needs positive radius/tapers and phi_lo < phi_hi".into()));
            }
        }
        Ok(())
    }

    /// Factor that is constant over one cone: `a * window(phi) * chi2(u, phi)`.
    #[inline]
    pub fn cone_factor(&self, u: &Vec3, phi: f64) -> f64 {
        let mut v = self.base.amplitude();
        if let Some(w) = &self.window {
            v *= w.eval(phi);
        }
        if let Some(c) = &self.cone {
            v *= c.eval(u, phi);
        }
        v
    }

    /// Radial part of the base: `1` or `1 / r`.
    #[inline]
    pub fn radial_factor(&self, r: f64) -> f64 {
        match self.base {
            WeightBase::Constant(_) => 1.0,
            WeightBase::InverseDistance(_) => 1.0 / r,
        }
    }

    #[inline]
    pub fn spatial_factor(&self, z: &Vec3) -> f64 {
        match &self.spatial {
            Some(c) => c.eval(z),
            None => 1.0,
        }
    }

    /// Scale against which nonvanishing is judged.
    pub fn amplitude_scale(&self) -> f64 {
        let a = self.base.amplitude().abs();
        match self.base {
            WeightBase::Constant(_) => a,
            WeightBase::InverseDistance(_) => a / self.min_separation,
        }
    }
}

/// `kappa(u, beta, phi, z)`.
pub fn eval_weight(spec: &WeightSpec, u: &Vec3, _beta: &Vec3, phi: f64, z: &Vec3) -> Result<f64, WeightError> {
    let r = (z - u).norm();
    if r < spec.min_separation {
        return Err(WeightError::VertexInVolume(r, spec.min_separation));
    }
    Ok(spec.cone_factor(u, phi) * spec.radial_factor(r) * spec.spatial_factor(z))
}

/// Whether `kappa` exceeds the nonvanishing floor at one or more of the cones
/// through `z`.
pub fn weight_nonvanishing_on(spec: &WeightSpec, cones: &[Cone], z: &Vec3) -> Result<bool, WeightError> {
    if cones.is_empty() {
        return Err(WeightError::EmptyConeSet);
    }
    let floor = NONVANISHING_THRESHOLD * spec.amplitude_scale();
    for c in cones {
        let k = eval_weight(spec, &c.vertex, &c.axis, c.opening, z)?;
        if k.abs() > floor {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn far_u() -> Vec3 {
        Vec3::new(0.0, 0.0, -2.0)
    }

    #[test]
    fn constant_weight_is_identity() {
        let w = WeightSpec::constant(1.0);
        let k = eval_weight(&w, &far_u(), &Vec3::z(), 0.5, &Vec3::zeros()).unwrap();
        assert_eq!(k, 1.0);
    }

    #[test]
    fn inverse_distance_at_two() {
        let w = WeightSpec::inverse_distance(1.0).with_window(AngularWindow::compton_default());
        let k = eval_weight(&w, &far_u(), &Vec3::z(), 0.5, &Vec3::zeros()).unwrap();
        assert_eq!(k, 0.5);
    }

    #[test]
    fn window_vanishes_outside_taper() {
        let win = AngularWindow::compton_default();
        let w = WeightSpec::constant(1.0).with_window(win);
        let (lo, hi) = win.support();
        for phi in [lo - 1e-9, 0.01, hi + 1e-9, 1.5] {
            assert_eq!(eval_weight(&w, &far_u(), &Vec3::z(), phi, &Vec3::zeros()).unwrap(), 0.0);
        }
        assert_eq!(win.eval(0.5), 1.0);
    }

    #[test]
    fn vertex_too_close_is_error() {
        let w = WeightSpec::constant(1.0);
        assert!(matches!(
            eval_weight(&w, &Vec3::zeros(), &Vec3::z(), 0.5, &Vec3::new(1e-8, 0.0, 0.0)),
            Err(WeightError::VertexInVolume(..))
        ));
    }

    #[test]
    fn doubling_amplitude_doubles_weight() {
        let mk = |a| {
            WeightSpec::inverse_distance(a)
                .with_window(AngularWindow::compton_default())
                .with_spatial(SpatialCutoff::Ball { center: Vec3::zeros(), radius: 0.3, taper: 0.1 })
        };
        for i in 0..50 {
            let z = Vec3::new(0.007 * i as f64, -0.003 * i as f64, 0.1);
            let phi = 0.05 + 0.025 * i as f64;
            let k1 = eval_weight(&mk(0.7), &far_u(), &Vec3::z(), phi, &z).unwrap();
            let k2 = eval_weight(&mk(1.4), &far_u(), &Vec3::z(), phi, &z).unwrap();
            assert_eq!(k2, 2.0 * k1);
        }
    }

    #[test]
    fn cutoffs_vanish_on_boundary_shell() {
        let ball = SpatialCutoff::Ball { center: Vec3::new(0.1, 0.0, 0.0), radius: 0.3, taper: 0.1 };
        let bx = SpatialCutoff::Box { min: Vec3::repeat(-0.2), max: Vec3::repeat(0.2), taper: 0.05 };
        for i in 0..500 {
            let t = i as f64 * 0.731;
            let dir = Vec3::new(t.cos() * (2.0 * t).sin(), t.sin() * (2.0 * t).sin(), (2.0 * t).cos());
            assert_eq!(ball.eval(&(Vec3::new(0.1, 0.0, 0.0) + dir * 0.4000001)), 0.0);
            let p = dir / dir.amax() * 0.2500001;
            assert_eq!(bx.eval(&p), 0.0);
        }
        assert_eq!(ball.eval(&Vec3::new(0.1, 0.0, 0.0)), 1.0);
    }

    #[test]
    fn second_differences_stay_bounded() {
        // C2 taper: second differences scale like h^2 under refinement.
        let win = AngularWindow::compton_default();
        let mut prev = f64::INFINITY;
        for level in 0..5 {
            let h = 1e-3 / (1 << level) as f64;
            let mut worst: f64 = 0.0;
            let (lo, hi) = win.support();
            let n = ((hi - lo) / h) as usize;
            for i in 1..n {
                let x = lo + i as f64 * h;
                let d2 = win.eval(x + h) - 2.0 * win.eval(x) + win.eval(x - h);
                worst = worst.max(d2.abs() / (h * h));
            }
            // bounded second derivative: 10 sqrt(3)/3 / taper^2 for the quintic
            assert!(worst < 5.78 / (win.taper * win.taper) * 1.01, "level {level}: {worst}");
            assert!(worst <= prev * 1.05);
            prev = worst;
        }
    }

    #[test]
    fn nonvanishing_predicates() {
        let z = Vec3::zeros();
        let cone = Cone::new(far_u(), Vec3::z(), 0.5, 0.0).unwrap();
        assert!(weight_nonvanishing_on(&WeightSpec::constant(1.0), &[cone], &z).unwrap());
        assert_eq!(
            weight_nonvanishing_on(&WeightSpec::constant(1.0), &[], &z),
            Err(WeightError::EmptyConeSet)
        );
        let narrow = AngularWindow { lo: 1.2, hi: 1.3, taper: 0.05 };
        assert!(!weight_nonvanishing_on(&WeightSpec::constant(1.0).with_window(narrow), &[cone], &z).unwrap());
        let away = ConeCutoff {
            vertex_center: Vec3::new(5.0, 5.0, 5.0),
            vertex_radius: 0.5,
            vertex_taper: 0.1,
            phi_lo: 0.1,
            phi_hi: 1.4,
            phi_taper: 0.05,
        };
        assert!(!weight_nonvanishing_on(&WeightSpec::constant(1.0).with_cone_cutoff(away), &[cone], &z).unwrap());
    }

    #[test]
    fn validation_rejects_window_outside_range() {
        let w = WeightSpec::constant(1.0).with_window(AngularWindow { lo: 0.01, hi: 1.0, taper: 0.05 });
        assert!(w.validate(0.0).is_err());
        assert!(WeightSpec::constant(1.0).with_window(AngularWindow::compton_default()).validate(0.02).is_ok());
    }
}
