//! Discrete weighted cone transform, its matched adjoint and the restricted
//! (curve vertices, fixed opening angle) variant.
//!
//! A cone integral is a midpoint rule on the cone surface
//! `z(r, a) = u + r (cos phi beta + sin phi (cos a e1 + sin a e2))` with
//! surface measure `r sin phi dr da`; the volume is read by trilinear
//! interpolation with zero extension. The adjoint visits exactly the same
//! quadrature nodes and scatters with the same trilinear weights, so it is the
//! transpose of the forward map for the inner products
//! `<f, h>_M = sum f h dz^3` and `<F, G> = sum F G w_data`.

use crate::geometry::{cone_frame, Aabb, Curve, DetectorSurface, GeometryError, Vec3, VertexChart};
use crate::weights::{WeightError, WeightSpec};
use rayon::prelude::*;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("inconsistent grids: {0}")]
    InconsistentGrids(String),
    #[error("non-finite input value at index {0}")]
    NonfiniteInput(usize),
    #[error("invalid quadrature: {0}")]
    InvalidQuadrature(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Weight(#[from] WeightError),
}

pub type Result<T> = std::result::Result<T, TransformError>;

/// Shape of a regular volume grid. Node `(i, j, k)` sits at
/// `origin + spacing * (i, j, k)`; values are stored C-order (`k` fastest).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeSpec {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl VolumeSpec {
    pub fn new(origin: Vec3, spacing: f64, dims: [usize; 3]) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) || dims.iter().any(|&n| n == 0) {
            return Err(TransformError::InconsistentGrids(format!(
                "volume needs positive spacing and nonzero dims, got {spacing} and {dims:?}"
            )));
        }
        Ok(VolumeSpec { origin, spacing, dims })
    }

    /// `n^3` grid filling the cube `[-half, half]^3`.
    pub fn centered_cube(n: usize, half: f64) -> Self {
        let spacing = 2.0 * half / (n - 1) as f64;
        VolumeSpec { origin: Vec3::repeat(-half), spacing, dims: [n, n, n] }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(3)
    }

    /// Box spanned by the grid nodes.
    pub fn bbox(&self) -> Aabb {
        let ext = Vec3::new(
            (self.dims[0] - 1) as f64,
            (self.dims[1] - 1) as f64,
            (self.dims[2] - 1) as f64,
        ) * self.spacing;
        Aabb::new(self.origin, self.origin + ext)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn node_of(&self, flat: usize) -> Vec3 {
        let k = flat % self.dims[2];
        let j = (flat / self.dims[2]) % self.dims[1];
        let i = flat / (self.dims[1] * self.dims[2]);
        self.node(i, j, k)
    }

    pub fn zeros(&self) -> VolumeGrid {
        VolumeGrid { spec: *self, values: vec![0.0; self.len()] }
    }

    pub fn from_fn(&self, mut f: impl FnMut(&Vec3) -> f64) -> VolumeGrid {
        let values = (0..self.len()).map(|idx| f(&self.node_of(idx))).collect();
        VolumeGrid { spec: *self, values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub spec: VolumeSpec,
    pub values: Vec<f64>,
}

impl VolumeGrid {
    pub fn new(spec: VolumeSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(TransformError::InconsistentGrids(format!(
                "volume has {} values, dims {:?} need {}",
                values.len(),
                spec.dims,
                spec.len()
            )));
        }
        Ok(VolumeGrid { spec, values })
    }

    /// `<f, h>_M = sum f h dz^3`.
    pub fn inner(&self, other: &VolumeGrid) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>() * self.spec.cell_volume()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn scaled(&self, s: f64) -> VolumeGrid {
        VolumeGrid { spec: self.spec, values: self.values.iter().map(|v| v * s).collect() }
    }

    fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(TransformError::NonfiniteInput(i)),
            None => Ok(()),
        }
    }

    /// Trilinear interpolation with zero extension, at world point `z`.
    pub fn interpolate(&self, z: &Vec3) -> f64 {
        let x = (z - self.spec.origin) / self.spec.spacing;
        let mut acc = 0.0;
        trilinear(&self.spec.dims, [x[0], x[1], x[2]], |idx, w| acc += w * self.values[idx]);
        acc
    }

    /// Box of the nonzero nodes, or `None` for an all-zero grid.
    pub fn support_box(&self) -> Option<Aabb> {
        let [n0, n1, n2] = self.spec.dims;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for i in 0..n0 {
            for j in 0..n1 {
                let row = self.spec.index(i, j, 0);
                for k in 0..n2 {
                    if self.values[row + k] != 0.0 {
                        any = true;
                        for (a, c) in [i, j, k].into_iter().enumerate() {
                            lo[a] = lo[a].min(c);
                            hi[a] = hi[a].max(c);
                        }
                    }
                }
            }
        }
        any.then(|| {
            Aabb::new(
                self.spec.node(lo[0], lo[1], lo[2]),
                self.spec.node(hi[0], hi[1], hi[2]),
            )
        })
    }
}

/// Visits the (up to) eight nodes of the trilinear stencil at index-space
/// point `x`, skipping nodes outside the grid.
#[inline]
pub(crate) fn trilinear(dims: &[usize; 3], x: [f64; 3], mut visit: impl FnMut(usize, f64)) {
    let mut base = [0i64; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        if !(x[a] > -1.0 && x[a] < dims[a] as f64) {
            return;
        }
        let f = x[a].floor();
        base[a] = f as i64;
        t[a] = x[a] - f;
    }
    let (n1, n2) = (dims[1] as i64, dims[2] as i64);
    let inside = (0..3).all(|a| base[a] >= 0 && base[a] + 1 < dims[a] as i64);
    if inside {
        let i0 = ((base[0] * n1 + base[1]) * n2 + base[2]) as usize;
        let (s1, s0) = (dims[2], dims[1] * dims[2]);
        let (u0, u1, u2) = (1.0 - t[0], 1.0 - t[1], 1.0 - t[2]);
        visit(i0, u0 * u1 * u2);
        visit(i0 + 1, u0 * u1 * t[2]);
        visit(i0 + s1, u0 * t[1] * u2);
        visit(i0 + s1 + 1, u0 * t[1] * t[2]);
        visit(i0 + s0, t[0] * u1 * u2);
        visit(i0 + s0 + 1, t[0] * u1 * t[2]);
        visit(i0 + s0 + s1, t[0] * t[1] * u2);
        visit(i0 + s0 + s1 + 1, t[0] * t[1] * t[2]);
        return;
    }
    for c in 0..8 {
        let mut w = 1.0;
        let mut idx = [0i64; 3];
        let mut ok = true;
        for a in 0..3 {
            let hi = (c >> (2 - a)) & 1 == 1;
            idx[a] = base[a] + hi as i64;
            if idx[a] < 0 || idx[a] >= dims[a] as i64 {
                ok = false;
                break;
            }
            w *= if hi { t[a] } else { 1.0 - t[a] };
        }
        if ok {
            visit(((idx[0] * n1 + idx[1]) * n2 + idx[2]) as usize, w);
        }
    }
}

/// Uniform midpoint axis on `[lo, hi]` with `n` nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Axis { lo, hi, n }
    }

    #[inline]
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.step()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(|i| self.node(i))
    }
}

/// How cone vertices are sampled.
#[derive(Debug, Clone, PartialEq)]
pub enum VertexSampling {
    /// Tensor grid over a two-parameter chart of the detector surface.
    Surface { chart: VertexChart, a: Axis, b: Axis },
    /// Samples of a vertex curve parameter.
    Curve { t: Axis },
}

/// How opening angles are sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiSampling {
    Grid(Axis),
    /// Restricted transform: a single fixed opening angle.
    Fixed(f64),
}

/// The sampled cone manifold `S x S^2 x (eps, pi/2 - eps)` and its measure.
///
/// Samples are ordered `(vertex a, vertex b, theta, psi, phi)`, C-order; the
/// curve case has `n_b = 1` and the fixed-angle case `n_phi = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataLayout {
    pub surface: DetectorSurface,
    pub vertices: VertexSampling,
    pub theta: Axis,
    pub psi: Axis,
    pub phi: PhiSampling,
    pub eps: f64,
}

/// A cone vertex sample with its measure element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexNode {
    pub u: Vec3,
    /// `|r1 x r2| da db` on a surface, `|u'(t)| dt` on a curve.
    pub measure: f64,
}

/// A cone axis sample with the completing frame and `sin theta dtheta dpsi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionNode {
    pub beta: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
    pub measure: f64,
}

impl DataLayout {
    pub fn dims(&self) -> [usize; 5] {
        let (na, nb) = match &self.vertices {
            VertexSampling::Surface { a, b, .. } => (a.n, b.n),
            VertexSampling::Curve { t } => (t.n, 1),
        };
        let nphi = match self.phi {
            PhiSampling::Grid(ax) => ax.n,
            PhiSampling::Fixed(_) => 1,
        };
        [na, nb, self.theta.n, self.psi.n, nphi]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_restricted(&self) -> bool {
        matches!(self.phi, PhiSampling::Fixed(_))
    }

    pub fn vertex_nodes(&self) -> Result<Vec<VertexNode>> {
        match (&self.vertices, &self.surface) {
            (VertexSampling::Surface { chart, a, b }, s @ (DetectorSurface::PlaneDisk(_) | DetectorSurface::Sphere(_))) => {
                let mut out = Vec::with_capacity(a.n * b.n);
                for va in a.nodes() {
                    for vb in b.nodes() {
                        let u = s.chart_point(*chart, [va, vb])?;
                        let j = s.chart_jacobian(*chart, [va, vb])?;
                        let area = j.column(0).cross(&j.column(1)).norm() * a.step() * b.step();
                        out.push(VertexNode { u, measure: area });
                    }
                }
                Ok(out)
            }
            (VertexSampling::Curve { t }, DetectorSurface::Curve(c)) => Ok(t
                .nodes()
                .map(|s| VertexNode { u: c.point(s), measure: c.tangent(s).norm() * t.step() })
                .collect()),
            _ => Err(TransformError::InconsistentGrids(format!(
                "vertex sampling does not match the {} detector",
                self.surface.kind_name()
            ))),
        }
    }

    pub fn direction_nodes(&self) -> Vec<DirectionNode> {
        let mut out = Vec::with_capacity(self.theta.n * self.psi.n);
        let dd = self.theta.step() * self.psi.step();
        for th in self.theta.nodes() {
            let (st, ct) = th.sin_cos();
            for ps in self.psi.nodes() {
                let (sp, cp) = ps.sin_cos();
                let beta = Vec3::new(st * cp, st * sp, ct);
                let (e1, e2) = cone_frame(&beta);
                out.push(DirectionNode { beta, e1, e2, measure: st * dd });
            }
        }
        out
    }

    /// `(phi, dphi)` per opening-angle sample; `dphi = 1` for the restricted case.
    pub fn phi_nodes(&self) -> Vec<(f64, f64)> {
        match self.phi {
            PhiSampling::Grid(ax) => ax.nodes().map(|p| (p, ax.step())).collect(),
            PhiSampling::Fixed(p) => vec![(p, 1.0)],
        }
    }

    /// Quadrature weight `w_data` of every sample.
    pub fn measure(&self) -> Result<Vec<f64>> {
        let verts = self.vertex_nodes()?;
        let dirs = self.direction_nodes();
        let phis = self.phi_nodes();
        let mut out = Vec::with_capacity(self.len());
        for v in &verts {
            for d in &dirs {
                for p in &phis {
                    out.push(v.measure * d.measure * p.1);
                }
            }
        }
        Ok(out)
    }

    /// `(vertex, direction, phi)` indices of a flat sample index.
    #[inline]
    pub fn split(&self, s: usize) -> (usize, usize, usize) {
        let d = self.dims();
        let nphi = d[4];
        let ndir = d[2] * d[3];
        (s / (ndir * nphi), (s / nphi) % ndir, s % nphi)
    }

    /// Checks that angles stay in their open intervals, vertex nodes are in
    /// their chart and no vertex lies in the volume box.
    pub fn validate(&self, volume: &VolumeSpec) -> Result<()> {
        let bad = |m: String| Err(TransformError::InconsistentGrids(m));
        if self.dims().iter().any(|&n| n == 0) {
            return bad(format!("data grid has an empty axis: {:?}", self.dims()));
        }
        if !(self.eps >= 0.0 && self.eps < std::f64::consts::FRAC_PI_4) {
            return bad(format!("eps = {} must lie in [0, pi/4)", self.eps));
        }
        if !(self.theta.lo >= 0.0 && self.theta.hi <= PI && self.theta.lo < self.theta.hi) {
            return bad("theta axis must lie in [0, pi]".into());
        }
        if !(self.psi.lo < self.psi.hi) {
            return bad("psi axis is empty".into());
        }
        let (plo, phi_hi) = match self.phi {
            PhiSampling::Grid(ax) => (ax.lo, ax.hi),
            PhiSampling::Fixed(p) => (p, p),
        };
        let top = std::f64::consts::FRAC_PI_2 - self.eps;
        let fixed = self.is_restricted();
        let ok = if fixed { plo > self.eps && phi_hi < top } else { plo >= self.eps && phi_hi <= top && plo < phi_hi };
        if !ok {
            return bad(format!("phi axis [{plo}, {phi_hi}] leaves (eps, pi/2 - eps)"));
        }
        let verts = self.vertex_nodes()?;
        self.surface
            .check_separation(&volume.bbox(), verts.iter().map(|v| &v.u))
            .map_err(|e| TransformError::InconsistentGrids(e.to_string()))?;
        Ok(())
    }

    pub fn zeros(&self) -> ConeDataGrid {
        ConeDataGrid { layout: self.clone(), values: vec![0.0; self.len()] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeDataGrid {
    pub layout: DataLayout,
    pub values: Vec<f64>,
}

impl ConeDataGrid {
    pub fn new(layout: DataLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(TransformError::InconsistentGrids(format!(
                "data has {} values, layout dims {:?} need {}",
                values.len(),
                layout.dims(),
                layout.len()
            )));
        }
        Ok(ConeDataGrid { layout, values })
    }

    /// `<F, G> = sum F G w_data`.
    pub fn inner(&self, other: &ConeDataGrid) -> Result<f64> {
        let w = self.layout.measure()?;
        Ok(self.values.iter().zip(&other.values).zip(&w).map(|((a, b), w)| a * b * w).sum())
    }

    pub fn norm(&self) -> Result<f64> {
        Ok(self.inner(self)?.sqrt())
    }
}

/// Surface quadrature on each cone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub n_alpha: usize,
    pub n_r: usize,
    /// Lower end of the radial interval; nodes sit at `r_min + (j + 1/2) dr`.
    pub r_min: f64,
    pub r_max: f64,
}

impl QuadratureSpec {
    pub fn new(n_alpha: usize, n_r: usize, r_max: f64) -> Self {
        QuadratureSpec { n_alpha, n_r, r_min: 0.0, r_max }
    }

    /// Default radial range for a detector and volume: `r_max` reaches from the
    /// detector's bounding sphere to the far corner of the volume plus two voxels.
    pub fn auto(layout: &DataLayout, volume: &VolumeSpec, n_alpha: usize, n_r: usize) -> Result<Self> {
        let corners = volume.bbox().corners();
        let r_max = match layout.surface.bounding_sphere() {
            Some((c, r)) => corners.iter().map(|p| (p - c).norm()).fold(0.0, f64::max) + r,
            None => {
                let verts = layout.vertex_nodes()?;
                verts
                    .iter()
                    .flat_map(|v| corners.iter().map(move |p| (p - v.u).norm()))
                    .fold(0.0, f64::max)
            }
        } + 2.0 * volume.spacing;
        Ok(QuadratureSpec { n_alpha, n_r, r_min: 0.0, r_max })
    }

    /// Like [`QuadratureSpec::auto`], but starts the radial interval two voxels
    /// before the volume box's nearest approach to any vertex sample.
    pub fn auto_trimmed(layout: &DataLayout, volume: &VolumeSpec, n_alpha: usize, n_r: usize) -> Result<Self> {
        let mut q = Self::auto(layout, volume, n_alpha, n_r)?;
        let bbox = volume.bbox();
        let verts = layout.vertex_nodes()?;
        let dmin = verts.iter().map(|v| bbox.distance(&v.u)).fold(f64::INFINITY, f64::min);
        q.r_min = (dmin - 2.0 * volume.spacing).max(0.0);
        let far = verts
            .iter()
            .flat_map(|v| bbox.corners().into_iter().map(move |p| (p - v.u).norm()))
            .fold(0.0, f64::max);
        q.r_max = q.r_max.min(far + 2.0 * volume.spacing);
        Ok(q)
    }

    pub fn refined(&self, factor: usize) -> Self {
        QuadratureSpec { n_alpha: self.n_alpha * factor, n_r: self.n_r * factor, ..*self }
    }

    pub fn dr(&self) -> f64 {
        (self.r_max - self.r_min) / self.n_r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_alpha < 8 || self.n_r < 8 {
            return Err(TransformError::InvalidQuadrature(format!(
                "need n_alpha >= 8 and n_r >= 8, got {} and {}",
                self.n_alpha, self.n_r
            )));
        }
        if !(self.r_min >= 0.0 && self.r_max > self.r_min && self.r_max.is_finite()) {
            return Err(TransformError::InvalidQuadrature(format!(
                "radial interval [{}, {}] is invalid",
                self.r_min, self.r_max
            )));
        }
        Ok(())
    }
}

/// Ball outside which nothing contributes.
#[derive(Debug, Clone, Copy)]
struct PruneBall {
    center: Vec3,
    radius: f64,
}

impl PruneBall {
    fn from_box(b: &Aabb) -> Self {
        PruneBall { center: b.center(), radius: b.circumradius() }
    }
}

fn intersect(a: &Aabb, b: &Aabb) -> Option<Aabb> {
    let min = a.min.sup(&b.min);
    let max = a.max.inf(&b.max);
    (0..3).all(|i| min[i] <= max[i]).then(|| Aabb::new(min, max))
}

/// Precomputed sample geometry shared by the forward and adjoint sweeps.
struct Kernel<'a> {
    layout: &'a DataLayout,
    vol: VolumeSpec,
    weight: &'a WeightSpec,
    quad: QuadratureSpec,
    verts: Vec<VertexNode>,
    dirs: Vec<DirectionNode>,
    phis: Vec<(f64, f64)>,
    trig: Vec<(f64, f64)>,
    ball: Option<PruneBall>,
}

impl<'a> Kernel<'a> {
    fn new(
        layout: &'a DataLayout,
        vol: &VolumeSpec,
        weight: &'a WeightSpec,
        quad: &QuadratureSpec,
        active: Option<Option<Aabb>>,
    ) -> Result<Self> {
        quad.validate()?;
        layout.validate(vol)?;
        let eps = layout.eps;
        weight.validate(eps)?;
        let verts = layout.vertex_nodes()?;
        let dirs = layout.direction_nodes();
        let phis = layout.phi_nodes();
        let da = 2.0 * PI / quad.n_alpha as f64;
        let trig = (0..quad.n_alpha).map(|k| ((k as f64 + 0.5) * da).sin_cos()).map(|(s, c)| (c, s)).collect();
        // Zero extension reaches one voxel past the node box.
        let h = Vec3::repeat(vol.spacing);
        let grown = Aabb::new(vol.bbox().min - h, vol.bbox().max + h);
        // `Some(None)`: the input is identically zero.
        let mut region = match active {
            Some(Some(b)) => intersect(&Aabb::new(b.min - h, b.max + h), &grown),
            Some(None) => None,
            None => Some(grown),
        };
        if let (Some(r), Some(sp)) = (region, &weight.spatial) {
            region = intersect(&r, &sp.support_box());
        }
        Ok(Kernel {
            layout,
            vol: *vol,
            weight,
            quad: *quad,
            verts,
            dirs,
            phis,
            trig,
            ball: region.map(|b| PruneBall::from_box(&b)),
        })
    }

    /// Calls `visit(index_space_point, coefficient)` for every quadrature node
    /// of sample `s` that can touch the volume. The cone integral of `f` is
    /// `sum coefficient * f~(point)`.
    #[inline]
    fn visit(&self, s: usize, mut visit: impl FnMut([f64; 3], f64)) {
        let Some(ball) = self.ball else { return };
        let (iv, id, ip) = self.layout.split(s);
        let v = &self.verts[iv];
        let d = &self.dirs[id];
        let (phi, _) = self.phis[ip];
        let kc = self.weight.cone_factor(&v.u, phi);
        if kc == 0.0 {
            return;
        }
        let (sp, cp) = phi.sin_cos();
        let to_ball = ball.center - v.u;
        let dist = to_ball.norm();
        if dist > ball.radius {
            // The ball subtends a cap of half-angle asin(R / dist) around to_ball.
            let gamma = (d.beta.dot(&to_ball) / dist).clamp(-1.0, 1.0).acos();
            let half = (ball.radius / dist).asin();
            if (gamma - phi).abs() > half + 1e-12 {
                return;
            }
        }
        let q = &self.quad;
        let dr = q.dr();
        let da = 2.0 * PI / q.n_alpha as f64;
        let r_lo = (dist - ball.radius).max(q.r_min);
        let r_hi = (dist + ball.radius).min(q.r_max);
        if r_hi < r_lo {
            return;
        }
        let j0 = (((r_lo - q.r_min) / dr - 0.5).ceil().max(0.0)) as usize;
        let j1 = ((((r_hi - q.r_min) / dr - 0.5).floor()) as i64).min(q.n_r as i64 - 1);
        if j1 < j0 as i64 {
            return;
        }
        let inv_h = 1.0 / self.vol.spacing;
        let dims = [self.vol.dims[0] as f64, self.vol.dims[1] as f64, self.vol.dims[2] as f64];
        let spatial = self.weight.spatial.as_ref();
        for j in j0..=(j1 as usize) {
            let r = q.r_min + (j as f64 + 0.5) * dr;
            let center = v.u + d.beta * (r * cp);
            let rho = r * sp;
            if (center - ball.center).norm() > ball.radius + rho {
                continue;
            }
            // Arc of the circle inside the ball: |p(a) - B|^2 <= R^2 iff
            // cos(a - a_B) >= (|B - C|^2 + rho^2 - R^2) / (2 rho |(B - C)_perp|).
            let to_c = ball.center - center;
            let (p1, p2) = (to_c.dot(&d.e1), to_c.dot(&d.e2));
            let perp = p1.hypot(p2);
            let num = to_c.norm_squared() + rho * rho - ball.radius * ball.radius;
            let n_alpha = q.n_alpha as i64;
            let (k0, k1) = if perp * rho == 0.0 || num <= -2.0 * rho * perp {
                if num > 0.0 && perp * rho == 0.0 {
                    continue;
                }
                (0, n_alpha - 1)
            } else {
                let c = num / (2.0 * rho * perp);
                if c > 1.0 {
                    continue;
                }
                let mid = p2.atan2(p1);
                let half = c.acos();
                let k0 = ((mid - half) / da - 0.5).ceil() as i64;
                let k1 = ((mid + half) / da - 0.5).floor() as i64;
                if k1 - k0 + 1 >= n_alpha {
                    (0, n_alpha - 1)
                } else {
                    (k0, k1)
                }
            };
            let coef_r = kc * self.weight.radial_factor(r) * rho * dr * da;
            let ci = (center - self.vol.origin) * inv_h;
            let a1 = d.e1 * (rho * inv_h);
            let a2 = d.e2 * (rho * inv_h);
            for k in k0..=k1 {
                let (ca, sa) = self.trig[k.rem_euclid(n_alpha) as usize];
                let x = [
                    ci[0] + ca * a1[0] + sa * a2[0],
                    ci[1] + ca * a1[1] + sa * a2[1],
                    ci[2] + ca * a1[2] + sa * a2[2],
                ];
                if !(x[0] > -1.0 && x[0] < dims[0] && x[1] > -1.0 && x[1] < dims[1] && x[2] > -1.0 && x[2] < dims[2]) {
                    continue;
                }
                let coef = match spatial {
                    Some(c) => {
                        let z = self.vol.origin + Vec3::new(x[0], x[1], x[2]) * self.vol.spacing;
                        let chi = c.eval(&z);
                        if chi == 0.0 {
                            continue;
                        }
                        coef_r * chi
                    }
                    None => coef_r,
                };
                visit(x, coef);
            }
        }
    }

    fn integrate(&self, s: usize, f: &[f64]) -> f64 {
        let dims = self.vol.dims;
        let mut acc = 0.0;
        self.visit(s, |x, coef| {
            let mut v = 0.0;
            trilinear(&dims, x, |idx, w| v += w * f[idx]);
            acc += coef * v;
        });
        acc
    }
}

/// Number of private accumulation volumes used by the adjoint; fixed so the
/// reduction order does not depend on the thread count.
const ADJOINT_CHUNKS: usize = 64;

/// Weighted cone transform of `f` sampled on `layout`.
pub fn forward(f: &VolumeGrid, layout: &DataLayout, w: &WeightSpec, q: &QuadratureSpec) -> Result<ConeDataGrid> {
    f.check_finite()?;
    let mut out = layout.zeros();
    let kernel = Kernel::new(layout, &f.spec, w, q, Some(f.support_box()))?;
    if kernel.ball.is_none() {
        return Ok(out);
    }
    out.values.par_iter_mut().enumerate().for_each(|(s, v)| *v = kernel.integrate(s, &f.values));
    Ok(out)
}

/// Exact transpose of [`forward`] for the weighted inner products.
pub fn adjoint(g: &ConeDataGrid, shape: &VolumeSpec, w: &WeightSpec, q: &QuadratureSpec) -> Result<VolumeGrid> {
    let layout = &g.layout;
    if g.values.len() != layout.len() {
        return Err(TransformError::InconsistentGrids(format!(
            "data has {} values, layout needs {}",
            g.values.len(),
            layout.len()
        )));
    }
    if let Some(i) = g.values.iter().position(|v| !v.is_finite()) {
        return Err(TransformError::NonfiniteInput(i));
    }
    let kernel = Kernel::new(layout, shape, w, q, None)?;
    let measure = layout.measure()?;
    let n = shape.len();
    let inv_cell = 1.0 / shape.cell_volume();
    let dims = shape.dims;
    let total = layout.len();
    let chunk = total.div_ceil(ADJOINT_CHUNKS).max(1);
    let partials: Vec<Option<Vec<f64>>> = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut acc: Option<Vec<f64>> = None;
            for s in c * chunk..((c + 1) * chunk).min(total) {
                let gs = g.values[s] * measure[s] * inv_cell;
                if gs == 0.0 {
                    continue;
                }
                let buf = acc.get_or_insert_with(|| vec![0.0; n]);
                kernel.visit(s, |x, coef| {
                    let c = gs * coef;
                    trilinear(&dims, x, |idx, wt| buf[idx] += c * wt);
                });
            }
            acc
        })
        .collect();
    let mut values = vec![0.0; n];
    for p in partials.into_iter().flatten() {
        for (a, b) in values.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok(VolumeGrid { spec: *shape, values })
}

/// Restricted transform: vertices on a curve, opening angle fixed.
pub fn restricted_forward(f: &VolumeGrid, layout: &DataLayout, w: &WeightSpec, q: &QuadratureSpec) -> Result<ConeDataGrid> {
    match (&layout.vertices, layout.phi, &layout.surface) {
        (VertexSampling::Curve { .. }, PhiSampling::Fixed(_), DetectorSurface::Curve(_)) => forward(f, layout, w, q),
        _ => Err(TransformError::InconsistentGrids(
            "restricted transform needs curve vertices and a fixed opening angle".into(),
        )),
    }
}

/// A single cone integral `int kappa f dS`, with the same quadrature as
/// [`forward`]. Intended for spot checks.
pub fn cone_integral(
    f: &VolumeGrid,
    u: &Vec3,
    beta: &Vec3,
    phi: f64,
    w: &WeightSpec,
    q: &QuadratureSpec,
) -> Result<f64> {
    let b = beta.normalize();
    let (e1, e2) = cone_frame(&b);
    let dr = q.dr();
    let da = 2.0 * PI / q.n_alpha as f64;
    let (sp, cp) = phi.sin_cos();
    let mut acc = 0.0;
    for j in 0..q.n_r {
        let r = q.r_min + (j as f64 + 0.5) * dr;
        for k in 0..q.n_alpha {
            let (sa, ca) = ((k as f64 + 0.5) * da).sin_cos();
            let z = u + (b * cp + (e1 * ca + e2 * sa) * sp) * r;
            let val = f.interpolate(&z);
            if val != 0.0 {
                acc += crate::weights::eval_weight(w, u, &b, phi, &z)? * val * r * sp * dr * da;
            }
        }
    }
    Ok(acc)
}

/// Convenience: a circle-of-vertices layout with a fixed opening angle.
pub fn curve_layout(curve: Curve, n_t: usize, theta: Axis, psi: Axis, phi0: f64, eps: f64) -> DataLayout {
    let (t0, t1) = curve.param_range();
    DataLayout {
        surface: DetectorSurface::Curve(curve),
        vertices: VertexSampling::Curve { t: Axis::new(t0, t1, n_t) },
        theta,
        psi,
        phi: PhiSampling::Fixed(phi0),
        eps,
    }
}

/// Full-sphere direction axes `theta in (0, pi)`, `psi in [0, 2 pi)`.
pub fn sphere_axes(n_theta: usize, n_psi: usize) -> (Axis, Axis) {
    (Axis::new(0.0, PI, n_theta), Axis::new(0.0, 2.0 * PI, n_psi))
}
