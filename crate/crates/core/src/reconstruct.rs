//! Normal operator `N = A^T A`, the symbol-order probe and iterative inversion.
//!
//! The solver is CGLS on `A f = g`, i.e. conjugate gradients on the normal
//! equations `N f = A^T g` without forming `N`. With the Bessel-potential
//! preconditioner it runs on `B = A Lambda^1`, so the iterate solves
//! `Lambda^1 N Lambda^1 f~ = Lambda^1 A^T g` and `f = Lambda^1 f~`. The data
//! residual `|g - A f|` is nonincreasing in exact arithmetic and is logged.

use crate::cone_transform::{
    adjoint, forward, ConeDataGrid, DataLayout, QuadratureSpec, TransformError, VolumeGrid, VolumeSpec,
};
use crate::geometry::Vec3;
use crate::microlocal::{covector_visible, Covector, MicrolocalError, VisibilityOptions};
use crate::spectral::riesz_precondition;
use crate::weights::WeightSpec;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructError {
    #[error("probe covector is not accessible with nonvanishing weight")]
    NotAccessible,
    #[error("frequency ladder out of band: {0}")]
    LadderOutOfBand(String),
    #[error("residual increased from {prev:e} to {next:e} at iteration {iter}; the adjoint pair is inconsistent")]
    Divergence { iter: usize, prev: f64, next: f64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Microlocal(#[from] MicrolocalError),
}

pub type Result<T> = std::result::Result<T, ReconstructError>;

/// The discretized operator `A`: data layout, volume shape, weight and
/// cone quadrature.
#[derive(Debug, Clone, Copy)]
pub struct ConeOperator<'a> {
    pub layout: &'a DataLayout,
    pub volume: &'a VolumeSpec,
    pub weight: &'a WeightSpec,
    pub quad: &'a QuadratureSpec,
}

impl<'a> ConeOperator<'a> {
    pub fn new(layout: &'a DataLayout, volume: &'a VolumeSpec, weight: &'a WeightSpec, quad: &'a QuadratureSpec) -> Self {
        ConeOperator { layout, volume, weight, quad }
    }

    pub fn forward(&self, f: &VolumeGrid) -> Result<ConeDataGrid> {
        if f.spec != *self.volume {
            return Err(TransformError::InconsistentGrids("volume does not match the operator grid".into()).into());
        }
        Ok(forward(f, self.layout, self.weight, self.quad)?)
    }

    pub fn adjoint(&self, g: &ConeDataGrid) -> Result<VolumeGrid> {
        Ok(adjoint(g, self.volume, self.weight, self.quad)?)
    }

    pub fn normal(&self, f: &VolumeGrid) -> Result<VolumeGrid> {
        self.adjoint(&self.forward(f)?)
    }
}

/// `adjoint(forward(f))`.
pub fn apply_normal(f: &VolumeGrid, layout: &DataLayout, w: &WeightSpec, q: &QuadratureSpec) -> Result<VolumeGrid> {
    ConeOperator::new(layout, &f.spec, w, q).normal(f)
}

/// Probe of the decay of `N` along one covector direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolProbeConfig {
    pub center: Vec3,
    pub window_radius: f64,
    pub direction: Vec3,
    /// Frequencies in cycles per unit length.
    pub ladder: Vec<f64>,
    pub amplitude: f64,
    /// Fraction of the radius on which the window is flat.
    pub plateau: f64,
    /// Minimum quadrature nodes per oscillation period along the cone.
    pub nodes_per_period: f64,
}

impl SymbolProbeConfig {
    pub fn new(center: Vec3, window_radius: f64, direction: Vec3, ladder: Vec<f64>) -> Self {
        SymbolProbeConfig { center, window_radius, direction, ladder, amplitude: 1.0, plateau: 0.0, nodes_per_period: 4.0 }
    }

    fn validate(&self, volume: &VolumeSpec) -> Result<()> {
        let bad = |m: String| Err(ReconstructError::LadderOutOfBand(m));
        if self.ladder.len() < 4 {
            return bad(format!("{} rungs, need at least 4", self.ladder.len()));
        }
        if !self.ladder.windows(2).all(|w| w[0] < w[1]) || !(self.ladder[0] > 0.0) {
            return bad("ladder must be positive and strictly increasing".into());
        }
        let limit = 0.25 / volume.spacing;
        if let Some(k) = self.ladder.iter().find(|&&k| k >= limit) {
            return bad(format!("k = {k} is not below Nyquist/2 = {limit}"));
        }
        if !(self.window_radius > 0.0) || !(self.direction.norm() > 0.0) || !(0.0..1.0).contains(&self.plateau) {
            return Err(ReconstructError::InvalidConfig("window radius and direction must be nonzero".into()));
        }
        Ok(())
    }

    /// Smooth compactly supported window: 1 up to `plateau * radius`, then
    /// `exp(1 - 1 / (1 - s^2))` in the rescaled distance `s`.
    pub fn window(&self, z: &Vec3) -> f64 {
        let rho = (z - self.center).norm() / self.window_radius;
        let s = ((rho - self.plateau) / (1.0 - self.plateau)).max(0.0);
        if s >= 1.0 {
            0.0
        } else {
            self.amplitude * (1.0 - 1.0 / (1.0 - s * s)).exp()
        }
    }

    /// `chi(z) cos(2 pi k zeta . (z - z0) - shift)`.
    pub fn probe(&self, volume: &VolumeSpec, k: f64, shift: f64) -> VolumeGrid {
        let dir = self.direction.normalize();
        volume.from_fn(|z| {
            let chi = self.window(z);
            if chi == 0.0 {
                0.0
            } else {
                chi * (2.0 * std::f64::consts::PI * k * dir.dot(&(z - self.center)) - shift).cos()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolProbe {
    /// `(k, a_k)` per rung.
    pub samples: Vec<(f64, f64)>,
    pub slope: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Cone quadrature fine enough for `nodes_per_period` nodes per period of a
/// mode with `k` cycles per unit length, never coarser than `q`.
pub fn probe_quadrature(q: &QuadratureSpec, k: f64, nodes_per_period: f64) -> QuadratureSpec {
    let per = nodes_per_period * k;
    let n_r = ((q.r_max - q.r_min) * per).ceil() as usize;
    let n_alpha = (2.0 * std::f64::consts::PI * q.r_max * per).ceil() as usize;
    QuadratureSpec { n_alpha: q.n_alpha.max(n_alpha), n_r: q.n_r.max(n_r), ..*q }
}

/// Rayleigh quotients `a_k = <N f, f>_M / <f, f>_M` of the complex probe
/// `f = chi exp(2 pi i k zeta . z)` on the ladder, and their log-log slope
/// (about `-2` where `N` is elliptic).
///
/// With `f = f_c + i f_s` and `N` real symmetric,
/// `a_k = (|A f_c|^2 + |A f_s|^2) / (|f_c|^2 + |f_s|^2)`. Summing both phases
/// removes the `cos(2 phase)` term of `|A f_c|^2`, which the data grid would
/// otherwise alias.
pub fn symbol_order_probe(
    cfg: &SymbolProbeConfig,
    volume: &VolumeSpec,
    layout: &DataLayout,
    w: &WeightSpec,
    q: &QuadratureSpec,
) -> Result<SymbolProbe> {
    cfg.validate(volume)?;
    let cv = Covector { z: cfg.center, zeta: cfg.direction.normalize() };
    if !covector_visible(&layout.surface, &cv, w, &VisibilityOptions::new(16))? {
        return Err(ReconstructError::NotAccessible);
    }
    let mut samples = Vec::with_capacity(cfg.ladder.len());
    for &k in &cfg.ladder {
        let qk = probe_quadrature(q, k, cfg.nodes_per_period);
        let (mut num, mut den) = (0.0, 0.0);
        for shift in [0.0, std::f64::consts::FRAC_PI_2] {
            let f = cfg.probe(volume, k, shift);
            let af = forward(&f, layout, w, &qk)?;
            num += af.inner(&af)?;
            den += f.inner(&f);
        }
        samples.push((k, num / den));
    }
    Ok(SymbolProbe { slope: loglog_slope(&samples), samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    None,
    RieszOrder2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ConjugateGradient,
    /// Diagnostic fixed-step gradient descent on `|g - A f|^2`.
    Landweber,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub preconditioner: Preconditioner,
    pub method: Method,
    /// Region for the masked error column of the log (1 visible, 0 not).
    pub visibility_mask: Option<VolumeGrid>,
}

impl SolverConfig {
    pub fn new(max_iters: usize, rel_tol: f64, preconditioner: Preconditioner) -> Self {
        SolverConfig { max_iters, rel_tol, preconditioner, method: Method::ConjugateGradient, visibility_mask: None }
    }

    pub fn validate(&self, volume: &VolumeSpec) -> Result<()> {
        if self.max_iters < 1 {
            return Err(ReconstructError::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(ReconstructError::InvalidConfig("rel_tol must be positive".into()));
        }
        if let Some(m) = &self.visibility_mask {
            if m.spec != *volume {
                return Err(ReconstructError::InvalidConfig(format!(
                    "mask dims {:?} differ from volume dims {:?}",
                    m.spec.dims, volume.dims
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// `A^T g = 0`; the zero volume is the solution.
    ZeroData,
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// Data residual `|g - A f|`.
    pub residual: f64,
    /// Normal-equation residual `|B^T (g - A f)|_M`, relative to its start.
    pub normal_residual: f64,
    pub error: Option<f64>,
    pub masked_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub f: VolumeGrid,
    pub log: Vec<IterRecord>,
    pub stop: StopReason,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.log.last().map_or(0, |r| r.iter)
    }

    /// Iteration log as CSV with a header row.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("iter,residual,normal_residual,error,masked_error\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for r in &self.log {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{},{}\n",
                r.iter,
                r.residual,
                r.normal_residual,
                opt(r.error),
                opt(r.masked_error)
            ));
        }
        s
    }
}

/// Relative grid-norm error `|f - truth| / |truth|`, optionally weighted by a
/// mask with values in `[0, 1]`.
pub fn relative_error(f: &VolumeGrid, truth: &VolumeGrid, mask: Option<&VolumeGrid>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..f.values.len() {
        let m = mask.map_or(1.0, |m| m.values[i]);
        num += m * (f.values[i] - truth.values[i]).powi(2);
        den += m * truth.values[i].powi(2);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

const MONOTONE_TOL: f64 = 1e-8;

/// Reconstructs `f` from `g`; `truth` (if given) adds error columns to the log.
pub fn solve(g: &ConeDataGrid, cfg: &SolverConfig, op: &ConeOperator, truth: Option<&VolumeGrid>) -> Result<SolveResult> {
    cfg.validate(op.volume)?;
    if g.layout != *op.layout {
        return Err(TransformError::InconsistentGrids("data layout does not match the operator".into()).into());
    }
    let sigma = match cfg.preconditioner {
        Preconditioner::None => 0.0,
        Preconditioner::RieszOrder2 => 1.0,
    };
    let lam = |v: &VolumeGrid| if sigma == 0.0 { v.clone() } else { riesz_precondition(v, sigma) };
    let b = |v: &VolumeGrid| op.forward(&lam(v));
    let bt = |r: &ConeDataGrid| -> Result<VolumeGrid> { Ok(lam(&op.adjoint(r)?)) };
    let record = |iter: usize, x: &VolumeGrid, res: f64, nres: f64| {
        let (error, masked_error) = match truth {
            Some(t) => {
                let f = lam(x);
                (Some(relative_error(&f, t, None)), cfg.visibility_mask.as_ref().map(|m| relative_error(&f, t, Some(m))))
            }
            None => (None, None),
        };
        IterRecord { iter, residual: res, normal_residual: nres, error, masked_error }
    };

    let mut x = op.volume.zeros();
    let mut r = g.clone();
    let mut res = r.norm()?;
    let mut s = bt(&r)?;
    let s0 = s.norm();
    let mut log = vec![record(0, &x, res, 1.0)];
    if s0 == 0.0 {
        return Ok(SolveResult { f: lam(&x), log, stop: StopReason::ZeroData });
    }
    let check = |iter: usize, prev: f64, next: f64| {
        if next > prev * (1.0 + MONOTONE_TOL) {
            Err(ReconstructError::Divergence { iter, prev, next })
        } else {
            Ok(())
        }
    };
    let mut stop = StopReason::MaxIters;
    match cfg.method {
        Method::ConjugateGradient => {
            let mut p = s.clone();
            let mut gamma = s0 * s0;
            for it in 1..=cfg.max_iters {
                let q = b(&p)?;
                let qq = q.inner(&q)?;
                if qq == 0.0 {
                    stop = StopReason::Converged;
                    break;
                }
                let alpha = gamma / qq;
                axpy(&mut x.values, alpha, &p.values);
                axpy(&mut r.values, -alpha, &q.values);
                s = bt(&r)?;
                let gamma_new = s.inner(&s);
                let next = r.norm()?;
                check(it, res, next)?;
                res = next;
                let rel = gamma_new.sqrt() / s0;
                log.push(record(it, &x, res, rel));
                if rel <= cfg.rel_tol {
                    stop = StopReason::Converged;
                    break;
                }
                let beta = gamma_new / gamma;
                gamma = gamma_new;
                for (pv, sv) in p.values.iter_mut().zip(&s.values) {
                    *pv = sv + beta * *pv;
                }
            }
        }
        Method::Landweber => {
            let tau = 1.0 / (1.1 * power_estimate(&b, &bt, op.volume, 20)?);
            for it in 1..=cfg.max_iters {
                axpy(&mut x.values, tau, &s.values);
                let ax = b(&x)?;
                for (rv, (gv, av)) in r.values.iter_mut().zip(g.values.iter().zip(&ax.values)) {
                    *rv = gv - av;
                }
                s = bt(&r)?;
                let next = r.norm()?;
                check(it, res, next)?;
                res = next;
                let rel = s.norm() / s0;
                log.push(record(it, &x, res, rel));
                if rel <= cfg.rel_tol {
                    stop = StopReason::Converged;
                    break;
                }
            }
        }
    }
    Ok(SolveResult { f: lam(&x), log, stop })
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Power iteration for the largest eigenvalue of `B^T B`.
fn power_estimate(
    b: &impl Fn(&VolumeGrid) -> Result<ConeDataGrid>,
    bt: &impl Fn(&ConeDataGrid) -> Result<VolumeGrid>,
    volume: &VolumeSpec,
    iters: usize,
) -> Result<f64> {
    let mut v = volume.from_fn(|z| 1.0 + 0.1 * (z[0] + 2.0 * z[1] - z[2]));
    let mut est = 0.0;
    for _ in 0..iters {
        let n = v.norm();
        if n == 0.0 {
            break;
        }
        v = v.scaled(1.0 / n);
        let w = bt(&b(&v)?)?;
        est = w.inner(&v);
        v = w;
    }
    if !(est > 0.0) {
        return Err(ReconstructError::InvalidConfig("operator norm estimate vanished".into()));
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone_transform::{sphere_axes, Axis, PhiSampling, VertexSampling};
    use crate::geometry::{DetectorSurface, VertexChart};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn setup(n: usize) -> (VolumeSpec, DataLayout, WeightSpec, QuadratureSpec) {
        let vol = VolumeSpec::centered_cube(n, 0.5);
        let (theta, psi) = sphere_axes(6, 10);
        let layout = DataLayout {
            surface: DetectorSurface::sphere(Vec3::zeros(), 1.2).unwrap(),
            vertices: VertexSampling::Surface {
                chart: VertexChart::SphereAngular,
                a: Axis::new(0.0, PI, 5),
                b: Axis::new(0.0, 2.0 * PI, 8),
            },
            theta,
            psi,
            phi: PhiSampling::Grid(Axis::new(0.1, 1.4, 4)),
            eps: 0.0,
        };
        let q = QuadratureSpec::auto(&layout, &vol, 24, 24).unwrap();
        (vol, layout, WeightSpec::constant(1.0), q)
    }

    fn random(spec: &VolumeSpec, seed: u64) -> VolumeGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec.from_fn(|_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn normal_is_symmetric_and_psd() {
        let (vol, layout, w, q) = setup(8);
        for seed in 0..3 {
            let f = random(&vol, seed);
            let h = random(&vol, seed + 100);
            let nf = apply_normal(&f, &layout, &w, &q).unwrap();
            let nh = apply_normal(&h, &layout, &w, &q).unwrap();
            let (a, b) = (nf.inner(&h), f.inner(&nh));
            assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
            assert!(nf.inner(&f) >= 0.0);
        }
    }

    #[test]
    fn zero_data_gives_zero_volume() {
        let (vol, layout, w, q) = setup(6);
        let op = ConeOperator::new(&layout, &vol, &w, &q);
        let res = solve(&layout.zeros(), &SolverConfig::new(10, 1e-6, Preconditioner::RieszOrder2), &op, None).unwrap();
        assert_eq!(res.stop, StopReason::ZeroData);
        assert!(res.iterations() <= 1);
        assert!(res.f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residuals_are_monotone() {
        let (vol, layout, w, q) = setup(8);
        let op = ConeOperator::new(&layout, &vol, &w, &q);
        let truth = vol.from_fn(|z| if z.norm() < 0.3 { 1.0 } else { 0.0 });
        let g = op.forward(&truth).unwrap();
        for pre in [Preconditioner::None, Preconditioner::RieszOrder2] {
            let res = solve(&g, &SolverConfig::new(8, 1e-12, pre), &op, Some(&truth)).unwrap();
            assert_eq!(res.stop, StopReason::MaxIters);
            assert!(res.log.windows(2).all(|w| w[1].residual <= w[0].residual * (1.0 + 1e-8)));
            assert!(res.log.last().unwrap().residual < 0.5 * res.log[0].residual);
        }
        let mut cfg = SolverConfig::new(5, 1e-12, Preconditioner::None);
        cfg.method = Method::Landweber;
        let res = solve(&g, &cfg, &op, None).unwrap();
        assert!(res.log.windows(2).all(|w| w[1].residual <= w[0].residual * (1.0 + 1e-8)));
    }

    #[test]
    fn invalid_configs() {
        let (vol, _, _, _) = setup(6);
        assert!(SolverConfig::new(0, 1e-3, Preconditioner::None).validate(&vol).is_err());
        assert!(SolverConfig::new(3, 0.0, Preconditioner::None).validate(&vol).is_err());
    }

    #[test]
    fn ladder_validation() {
        let vol = VolumeSpec::centered_cube(16, 0.5);
        let c = |ladder: Vec<f64>| SymbolProbeConfig::new(Vec3::zeros(), 0.3, Vec3::x(), ladder).validate(&vol);
        assert!(c(vec![1.0, 2.0, 3.0]).is_err());
        assert!(c(vec![1.0, 2.0, 2.0, 3.0]).is_err());
        // Nyquist/2 = 0.25 / (1/15) = 3.75
        assert!(c(vec![1.0, 2.0, 3.0, 3.8]).is_err());
        assert!(c(vec![1.0, 2.0, 3.0, 3.5]).is_ok());
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 3.0, 5.0].iter().map(|&k: &f64| (k, 7.0 * k.powf(-2.0))).collect();
        assert!((loglog_slope(&pts) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn csv_log_has_header() {
        let (vol, layout, w, q) = setup(6);
        let op = ConeOperator::new(&layout, &vol, &w, &q);
        let truth = vol.from_fn(|z| (-(z.norm_squared()) * 20.0).exp());
        let g = op.forward(&truth).unwrap();
        let res = solve(&g, &SolverConfig::new(2, 1e-12, Preconditioner::None), &op, Some(&truth)).unwrap();
        let csv = res.log_csv();
        assert!(csv.starts_with("iter,residual,normal_residual,error,masked_error\n"));
        assert_eq!(csv.lines().count(), res.log.len() + 1);
    }
}
