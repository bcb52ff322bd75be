//! Experiment plumbing: phantoms, the array file format, TOML experiment
//! configuration and the numerical self-test.

use crate::cone_transform::{
    adjoint, forward, sphere_axes, Axis, ConeDataGrid, DataLayout, PhiSampling, QuadratureSpec, TransformError,
    VertexSampling, VolumeGrid, VolumeSpec,
};
use crate::geometry::{DetectorSurface, GeometryError, Vec3, VertexChart};
use crate::microlocal::{
    canonical_sample, is_accessible, recover_covector, restricted_recover, restricted_sample,
    Covector, MicrolocalError,
};
use crate::reconstruct::{
    symbol_order_probe, Method, Preconditioner, ReconstructError, SolverConfig, SymbolProbe, SymbolProbeConfig,
};
use crate::spectral::riesz_precondition;
use crate::weights::{AngularWindow, ConeCutoff, SpatialCutoff, WeightError, WeightSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed array file: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("phantom leaves the volume box: {0}")]
    OutOfBox(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Microlocal(#[from] MicrolocalError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
}

impl From<GeometryError> for HarnessError {
    fn from(e: GeometryError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<WeightError> for HarnessError {
    fn from(e: WeightError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

// ---------------------------------------------------------------------------
// Phantoms

/// Test volumes. Angles are not involved; lengths are in volume units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Phantom {
    /// Indicator of a ball, antialiased with 8 subsamples per voxel.
    Ball { center: [f64; 3], radius: f64, amplitude: f64 },
    /// Indicator of a box, antialiased like the ball.
    Box { min: [f64; 3], max: [f64; 3], amplitude: f64 },
    /// `a exp(1 - 1 / (1 - rho^2))`, `rho = |z - c| / radius`.
    SmoothBump { center: [f64; 3], radius: f64, amplitude: f64 },
    /// Smooth bump times `cos(2 pi k zeta . (z - c))`, `k` in cycles per unit length.
    OscillatoryProbe { center: [f64; 3], radius: f64, direction: [f64; 3], k: f64, amplitude: f64 },
    Composite { parts: Vec<Phantom> },
}

fn bump(rho2: f64) -> f64 {
    if rho2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - rho2)).exp()
    }
}

impl Phantom {
    pub fn ball(center: Vec3, radius: f64, amplitude: f64) -> Self {
        Phantom::Ball { center: center.into(), radius, amplitude }
    }

    pub fn smooth_bump(center: Vec3, radius: f64, amplitude: f64) -> Self {
        Phantom::SmoothBump { center: center.into(), radius, amplitude }
    }

    fn support(&self) -> Vec<(Vec3, Vec3)> {
        match self {
            Phantom::Ball { center, radius, .. }
            | Phantom::SmoothBump { center, radius, .. }
            | Phantom::OscillatoryProbe { center, radius, .. } => {
                let c = v3(*center);
                vec![(c - Vec3::repeat(*radius), c + Vec3::repeat(*radius))]
            }
            Phantom::Box { min, max, .. } => vec![(v3(*min), v3(*max))],
            Phantom::Composite { parts } => parts.iter().flat_map(|p| p.support()).collect(),
        }
    }

    fn validate(&self, grid: &VolumeSpec) -> Result<()> {
        let bx = grid.bbox();
        let finite = |x: f64| x.is_finite();
        let ok = match self {
            Phantom::Ball { radius, amplitude, .. } | Phantom::SmoothBump { radius, amplitude, .. } => {
                *radius > 0.0 && finite(*amplitude)
            }
            Phantom::OscillatoryProbe { radius, amplitude, direction, k, .. } => {
                *radius > 0.0 && finite(*amplitude) && v3(*direction).norm() > 0.0 && finite(*k)
            }
            Phantom::Box { min, max, amplitude } => (0..3).all(|i| min[i] < max[i]) && finite(*amplitude),
            Phantom::Composite { parts } => {
                for p in parts {
                    p.validate(grid)?;
                }
                true
            }
        };
        if !ok {
            return Err(HarnessError::Config(format!("invalid phantom {self:?}")));
        }
        for (lo, hi) in self.support() {
            if !(bx.contains(&lo) && bx.contains(&hi)) {
                return Err(HarnessError::OutOfBox(format!(
                    "support [{:?}, {:?}] not inside [{:?}, {:?}]",
                    lo.as_slice(),
                    hi.as_slice(),
                    bx.min.as_slice(),
                    bx.max.as_slice()
                )));
            }
        }
        Ok(())
    }

    /// Value (or subsampled cell average for indicators) at node `z`.
    fn value(&self, z: &Vec3, h: f64) -> f64 {
        let subsampled = |inside: &dyn Fn(&Vec3) -> bool| {
            let mut n = 0;
            for c in 0..8 {
                let off = Vec3::new(
                    if c & 4 != 0 { 0.25 } else { -0.25 },
                    if c & 2 != 0 { 0.25 } else { -0.25 },
                    if c & 1 != 0 { 0.25 } else { -0.25 },
                ) * h;
                if inside(&(z + off)) {
                    n += 1;
                }
            }
            n as f64 / 8.0
        };
        match self {
            Phantom::Ball { center, radius, amplitude } => {
                let c = v3(*center);
                if *amplitude == 0.0 || (z - c).norm() > radius + h {
                    return 0.0;
                }
                amplitude * subsampled(&|p| (p - c).norm_squared() < radius * radius)
            }
            Phantom::Box { min, max, amplitude } => {
                if *amplitude == 0.0 {
                    return 0.0;
                }
                amplitude * subsampled(&|p| (0..3).all(|i| p[i] > min[i] && p[i] < max[i]))
            }
            Phantom::SmoothBump { center, radius, amplitude } => {
                amplitude * bump((z - v3(*center)).norm_squared() / (radius * radius))
            }
            Phantom::OscillatoryProbe { center, radius, direction, k, amplitude } => {
                let c = v3(*center);
                let chi = bump((z - c).norm_squared() / (radius * radius));
                if chi == 0.0 {
                    return 0.0;
                }
                let d = v3(*direction).normalize();
                amplitude * chi * (2.0 * PI * k * d.dot(&(z - c))).cos()
            }
            Phantom::Composite { parts } => parts.iter().map(|p| p.value(z, h)).sum(),
        }
    }
}

/// Rasterizes a phantom on a volume grid.
pub fn make_phantom(spec: &Phantom, grid: &VolumeSpec) -> Result<VolumeGrid> {
    spec.validate(grid)?;
    Ok(grid.from_fn(|z| spec.value(z, grid.spacing)))
}

// ---------------------------------------------------------------------------
// Array files

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    Volume,
    Conedata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisHeader {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

/// JSON header of an array file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub kind: ArrayKind,
    pub dims: Vec<usize>,
    pub dtype: String,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<Vec<AxisHeader>>,
}

/// A JSON header line, a newline, then `prod(dims)` little-endian `f64`s.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFile {
    pub header: ArrayHeader,
    pub data: Vec<f64>,
}

pub const CONE_AXIS_NAMES: [&str; 5] = ["vertex_a", "vertex_b", "theta", "psi", "phi"];

fn layout_axes(layout: &DataLayout) -> Vec<AxisHeader> {
    let ax = |name: &str, a: &Axis| AxisHeader { name: name.into(), lo: a.lo, hi: a.hi, n: a.n };
    let (a, b) = match &layout.vertices {
        VertexSampling::Surface { a, b, .. } => (*a, *b),
        VertexSampling::Curve { t } => (*t, Axis::new(0.0, 0.0, 1)),
    };
    let phi = match layout.phi {
        PhiSampling::Grid(p) => p,
        PhiSampling::Fixed(p) => Axis::new(p, p, 1),
    };
    vec![
        ax(CONE_AXIS_NAMES[0], &a),
        ax(CONE_AXIS_NAMES[1], &b),
        ax(CONE_AXIS_NAMES[2], &layout.theta),
        ax(CONE_AXIS_NAMES[3], &layout.psi),
        ax(CONE_AXIS_NAMES[4], &phi),
    ]
}

impl ArrayFile {
    pub fn from_volume(f: &VolumeGrid) -> Self {
        ArrayFile {
            header: ArrayHeader {
                kind: ArrayKind::Volume,
                dims: f.spec.dims.to_vec(),
                dtype: "f64".into(),
                order: "C".into(),
                origin: Some(f.spec.origin.into()),
                spacing: Some(f.spec.spacing),
                axes: None,
            },
            data: f.values.clone(),
        }
    }

    pub fn from_conedata(g: &ConeDataGrid) -> Self {
        ArrayFile {
            header: ArrayHeader {
                kind: ArrayKind::Conedata,
                dims: g.layout.dims().to_vec(),
                dtype: "f64".into(),
                order: "C".into(),
                origin: None,
                spacing: None,
                axes: Some(layout_axes(&g.layout)),
            },
            data: g.values.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| HarnessError::Format("missing header terminator".into()))?;
        let header: ArrayHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| HarnessError::Format(format!("bad header: {e}")))?;
        if header.dtype != "f64" || header.order != "C" {
            return Err(HarnessError::Format(format!(
                "unsupported dtype/order {}/{}",
                header.dtype, header.order
            )));
        }
        let n: usize = header.dims.iter().product();
        let payload = &bytes[nl + 1..];
        if payload.len() != n * 8 {
            return Err(HarnessError::Format(format!(
                "payload has {} bytes, dims {:?} need {}",
                payload.len(),
                header.dims,
                n * 8
            )));
        }
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(ArrayFile { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |source| HarnessError::Io { path: path.display().to_string(), source };
        let mut file = std::fs::File::create(path).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let io = |source| HarnessError::Io { path: path.display().to_string(), source };
        let mut buf = Vec::new();
        std::fs::File::open(path).map_err(io)?.read_to_end(&mut buf).map_err(io)?;
        Self::from_bytes(&buf)
    }

    /// Interprets the file as a volume on `expected`; mismatches are
    /// configuration errors naming the offending axis.
    pub fn into_volume(self, expected: &VolumeSpec) -> Result<VolumeGrid> {
        if self.header.kind != ArrayKind::Volume {
            return Err(HarnessError::Config("expected a volume array file, found cone data".into()));
        }
        if self.header.dims.len() != 3 {
            return Err(HarnessError::Config(format!("volume file has {} axes, need 3", self.header.dims.len())));
        }
        for (a, name) in ["x", "y", "z"].iter().enumerate() {
            if self.header.dims[a] != expected.dims[a] {
                return Err(HarnessError::Config(format!(
                    "volume axis {name}: file has {} samples, configuration expects {}",
                    self.header.dims[a], expected.dims[a]
                )));
            }
        }
        Ok(VolumeGrid::new(*expected, self.data)?)
    }

    /// Interprets the file as cone data on `layout`.
    pub fn into_conedata(self, layout: &DataLayout) -> Result<ConeDataGrid> {
        if self.header.kind != ArrayKind::Conedata {
            return Err(HarnessError::Config("expected a cone data array file, found a volume".into()));
        }
        let dims = layout.dims();
        if self.header.dims.len() != 5 {
            return Err(HarnessError::Config(format!("cone data file has {} axes, need 5", self.header.dims.len())));
        }
        for a in 0..5 {
            if self.header.dims[a] != dims[a] {
                return Err(HarnessError::Config(format!(
                    "cone data axis {}: file has {} samples, configuration expects {}",
                    CONE_AXIS_NAMES[a], self.header.dims[a], dims[a]
                )));
            }
        }
        Ok(ConeDataGrid::new(layout.clone(), self.data)?)
    }
}

// ---------------------------------------------------------------------------
// Configuration

fn zero3() -> [f64; 3] {
    [0.0; 3]
}
fn ez() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}
fn one() -> f64 {
    1.0
}

/// Detector block. `kind` is one of `plane`, `disk`, `sphere`, `circle`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: String,
    #[serde(default = "zero3")]
    pub center: [f64; 3],
    #[serde(default = "ez")]
    pub normal: [f64; 3],
    #[serde(default)]
    pub radius: Option<f64>,
    /// Half-width of the vertex sampling square on an unbounded plane.
    #[serde(default = "plane_half_width")]
    pub plane_half_width: f64,
}

fn plane_half_width() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialConfig {
    /// `ball` or `box`.
    pub kind: String,
    #[serde(default = "zero3")]
    pub center: [f64; 3],
    #[serde(default)]
    pub radius: f64,
    #[serde(default = "zero3")]
    pub min: [f64; 3],
    #[serde(default = "zero3")]
    pub max: [f64; 3],
    pub taper: f64,
}

/// Cone cutoff; angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeCutoffConfig {
    pub vertex_center: [f64; 3],
    pub vertex_radius: f64,
    pub vertex_taper: f64,
    pub phi_lo_deg: f64,
    pub phi_hi_deg: f64,
    pub phi_taper_deg: f64,
}

/// Weight block. `base` is `constant` or `inverse_distance`; the window is
/// `[lo, hi, taper]` in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    #[serde(default = "constant_base")]
    pub base: String,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub window_deg: Option<[f64; 3]>,
    #[serde(default)]
    pub spatial: Option<SpatialConfig>,
    #[serde(default)]
    pub cone: Option<ConeCutoffConfig>,
    #[serde(default = "min_separation")]
    pub min_separation: f64,
}

fn min_separation() -> f64 {
    1e-6
}

fn constant_base() -> String {
    "constant".into()
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            base: constant_base(),
            amplitude: 1.0,
            window_deg: None,
            spatial: None,
            cone: None,
            min_separation: min_separation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeConfig {
    /// Nodes per axis.
    pub n: usize,
    /// The node box is `center +- half_width`.
    #[serde(default = "half")]
    pub half_width: f64,
    #[serde(default = "zero3")]
    pub center: [f64; 3],
}

fn half() -> f64 {
    0.5
}

/// Cone manifold sampling. `vertex` is `[n_a, n_b]` for surfaces and
/// `[n_t, 1]` for a circle; angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub vertex: [usize; 2],
    pub n_theta: usize,
    pub n_psi: usize,
    #[serde(default = "one_usize")]
    pub n_phi: usize,
    #[serde(default)]
    pub eps_deg: f64,
    /// Defaults to `(eps, 90 - eps)`.
    #[serde(default)]
    pub phi_range_deg: Option<[f64; 2]>,
    /// Fixed opening angle of the restricted transform (circle detectors).
    #[serde(default)]
    pub phi0_deg: Option<f64>,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridsConfig {
    pub volume: VolumeConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    #[serde(default = "n_default")]
    pub n_alpha: usize,
    #[serde(default = "n_default")]
    pub n_r: usize,
    /// Radial interval; derived from the detector and volume when absent.
    #[serde(default)]
    pub r_min: Option<f64>,
    #[serde(default)]
    pub r_max: Option<f64>,
}

fn n_default() -> usize {
    32
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { n_alpha: 32, n_r: 32, r_min: None, r_max: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "max_iters")]
    pub max_iters: usize,
    #[serde(default = "rel_tol")]
    pub rel_tol: f64,
    /// `none` or `riesz`.
    #[serde(default = "riesz")]
    pub preconditioner: String,
    /// `cg` or `landweber`.
    #[serde(default = "cg")]
    pub method: String,
}

fn max_iters() -> usize {
    100
}
fn rel_tol() -> f64 {
    1e-6
}
fn riesz() -> String {
    "riesz".into()
}
fn cg() -> String {
    "cg".into()
}

impl Default for SolverBlock {
    fn default() -> Self {
        SolverBlock { max_iters: 100, rel_tol: 1e-6, preconditioner: riesz(), method: cg() }
    }
}

/// Self-test sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelftestConfig {
    #[serde(default = "adjoint_pairs")]
    pub adjoint_pairs: usize,
    #[serde(default = "roundtrip_covectors")]
    pub roundtrip_covectors: usize,
}

fn adjoint_pairs() -> usize {
    3
}
fn roundtrip_covectors() -> usize {
    200
}

impl Default for SelftestConfig {
    fn default() -> Self {
        SelftestConfig { adjoint_pairs: 3, roundtrip_covectors: 200 }
    }
}

fn default_phantom() -> Vec<Phantom> {
    vec![Phantom::Ball { center: [0.0; 3], radius: 0.25, amplitude: 1.0 }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub detector: DetectorConfig,
    #[serde(default)]
    pub weight: WeightConfig,
    pub grids: GridsConfig,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub selftest: SelftestConfig,
    #[serde(default = "default_phantom")]
    pub phantom: Vec<Phantom>,
}

/// The configuration shipped with the command-line tool.
pub const DEFAULT_CONFIG_TOML: &str = r#"seed = 7

[detector]
kind = "sphere"
center = [0.0, 0.0, 0.0]
radius = 1.2

[weight]
base = "constant"
amplitude = 1.0
window_deg = [5.0, 75.0, 2.0]

[grids.volume]
n = 12
half_width = 0.5

[grids.data]
vertex = [6, 8]
n_theta = 6
n_psi = 10
n_phi = 4

[quadrature]
n_alpha = 24
n_r = 24

[solver]
max_iters = 20
rel_tol = 1e-6
preconditioner = "riesz"

[[phantom]]
kind = "ball"
center = [0.0, 0.0, 0.0]
radius = 0.25
amplitude = 1.0
"#;

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG_TOML).expect("shipped config parses")
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// Builds every derived object once, so inconsistencies surface at load.
    pub fn validate(&self) -> Result<()> {
        let vol = self.volume_spec()?;
        let layout = self.layout()?;
        layout.validate(&vol)?;
        let w = self.weight()?;
        w.validate(layout.eps)?;
        self.quadrature(&layout, &vol)?.validate()?;
        self.solver()?.validate(&vol)?;
        for p in &self.phantom {
            p.validate(&vol)?;
        }
        Ok(())
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn surface(&self) -> Result<DetectorSurface> {
        let d = &self.detector;
        let c = v3(d.center);
        let n = v3(d.normal);
        let need_radius = || d.radius.ok_or_else(|| HarnessError::Config(format!("{} detector needs a radius", d.kind)));
        Ok(match d.kind.as_str() {
            "plane" => DetectorSurface::plane(c, n)?,
            "disk" => DetectorSurface::disk(c, n, need_radius()?)?,
            "sphere" => DetectorSurface::sphere(c, need_radius()?)?,
            "circle" => DetectorSurface::circle(c, n, need_radius()?)?,
            other => return Err(HarnessError::Config(format!("unknown detector kind `{other}`"))),
        })
    }

    pub fn volume_spec(&self) -> Result<VolumeSpec> {
        let v = &self.grids.volume;
        if v.n < 2 || !(v.half_width > 0.0) {
            return Err(HarnessError::Config("volume needs n >= 2 and half_width > 0".into()));
        }
        let spacing = 2.0 * v.half_width / (v.n - 1) as f64;
        Ok(VolumeSpec::new(v3(v.center) - Vec3::repeat(v.half_width), spacing, [v.n; 3])?)
    }

    pub fn layout(&self) -> Result<DataLayout> {
        let surface = self.surface()?;
        let d = &self.grids.data;
        let eps = d.eps_deg.to_radians();
        let (theta, psi) = sphere_axes(d.n_theta, d.n_psi);
        let [na, nb] = d.vertex;
        let vertices = match &surface {
            DetectorSurface::Sphere(_) => VertexSampling::Surface {
                chart: VertexChart::SphereAngular,
                a: Axis::new(0.0, PI, na),
                b: Axis::new(0.0, 2.0 * PI, nb),
            },
            DetectorSurface::PlaneDisk(p) => match p.radius {
                Some(r) => VertexSampling::Surface {
                    chart: VertexChart::DiskPolar,
                    a: Axis::new(0.0, r, na),
                    b: Axis::new(0.0, 2.0 * PI, nb),
                },
                None => {
                    let h = self.detector.plane_half_width;
                    VertexSampling::Surface { chart: VertexChart::Plane, a: Axis::new(-h, h, na), b: Axis::new(-h, h, nb) }
                }
            },
            DetectorSurface::Curve(c) => {
                if nb != 1 {
                    return Err(HarnessError::Config("curve detectors take vertex = [n_t, 1]".into()));
                }
                let (t0, t1) = c.param_range();
                VertexSampling::Curve { t: Axis::new(t0, t1, na) }
            }
        };
        let phi = match (&surface, d.phi0_deg) {
            (DetectorSurface::Curve(_), Some(p)) => PhiSampling::Fixed(p.to_radians()),
            (DetectorSurface::Curve(_), None) => {
                return Err(HarnessError::Config("circle detector needs grids.data.phi0_deg".into()))
            }
            (_, Some(_)) => return Err(HarnessError::Config("phi0_deg applies to circle detectors only".into())),
            (_, None) => {
                let [lo, hi] = d.phi_range_deg.unwrap_or([d.eps_deg, 90.0 - d.eps_deg]);
                PhiSampling::Grid(Axis::new(lo.to_radians(), hi.to_radians(), d.n_phi))
            }
        };
        Ok(DataLayout { surface, vertices, theta, psi, phi, eps })
    }

    pub fn weight(&self) -> Result<WeightSpec> {
        let c = &self.weight;
        let mut w = match c.base.as_str() {
            "constant" => WeightSpec::constant(c.amplitude),
            "inverse_distance" => WeightSpec::inverse_distance(c.amplitude),
            other => return Err(HarnessError::Config(format!("unknown weight base `{other}`"))),
        };
        w.min_separation = c.min_separation;
        if let Some([lo, hi, t]) = c.window_deg {
            w = w.with_window(AngularWindow { lo: lo.to_radians(), hi: hi.to_radians(), taper: t.to_radians() });
        }
        if let Some(s) = &c.spatial {
            let cut = match s.kind.as_str() {
                "ball" => SpatialCutoff::Ball { center: v3(s.center), radius: s.radius, taper: s.taper },
                "box" => SpatialCutoff::Box { min: v3(s.min), max: v3(s.max), taper: s.taper },
                other => return Err(HarnessError::Config(format!("unknown spatial cutoff `{other}`"))),
            };
            w = w.with_spatial(cut);
        }
        if let Some(k) = &c.cone {
            w = w.with_cone_cutoff(ConeCutoff {
                vertex_center: v3(k.vertex_center),
                vertex_radius: k.vertex_radius,
                vertex_taper: k.vertex_taper,
                phi_lo: k.phi_lo_deg.to_radians(),
                phi_hi: k.phi_hi_deg.to_radians(),
                phi_taper: k.phi_taper_deg.to_radians(),
            });
        }
        Ok(w)
    }

    pub fn quadrature(&self, layout: &DataLayout, volume: &VolumeSpec) -> Result<QuadratureSpec> {
        let q = &self.quadrature;
        let mut spec = QuadratureSpec::auto(layout, volume, q.n_alpha, q.n_r)?;
        if let Some(r) = q.r_max {
            spec.r_max = r;
        }
        if let Some(r) = q.r_min {
            spec.r_min = r;
        }
        Ok(spec)
    }

    pub fn solver(&self) -> Result<SolverConfig> {
        let s = &self.solver;
        let pre = match s.preconditioner.as_str() {
            "none" => Preconditioner::None,
            "riesz" => Preconditioner::RieszOrder2,
            other => return Err(HarnessError::Config(format!("unknown preconditioner `{other}`"))),
        };
        let mut cfg = SolverConfig::new(s.max_iters, s.rel_tol, pre);
        cfg.method = match s.method.as_str() {
            "cg" => Method::ConjugateGradient,
            "landweber" => Method::Landweber,
            other => return Err(HarnessError::Config(format!("unknown solver method `{other}`"))),
        };
        Ok(cfg)
    }

    pub fn phantom(&self) -> Phantom {
        Phantom::Composite { parts: self.phantom.clone() }
    }
}

// ---------------------------------------------------------------------------
// Symbol-order experiments

/// A ready-to-run symbol-order probe on a `n^3` unit-box volume.
#[derive(Debug, Clone)]
pub struct ProbeExperiment {
    pub volume: VolumeSpec,
    pub layout: DataLayout,
    pub weight: WeightSpec,
    pub quad: QuadratureSpec,
    pub probe: SymbolProbeConfig,
}

/// Ladder in cycles per unit length; the top rung sits near a seventh of the
/// 32^3 Nyquist frequency so trilinear damping stays small.
pub const PROBE_LADDER: [f64; 4] = [2.2, 2.8, 3.5, 4.4];

impl ProbeExperiment {
    fn build(n: usize, surface: DetectorSurface, vertices: VertexSampling, radius: f64, dir: Vec3) -> Result<Self> {
        let volume = VolumeSpec::new(Vec3::repeat(-0.5), 1.0 / (n - 1) as f64, [n; 3])?;
        let (theta, psi) = sphere_axes(12, 24);
        let layout = DataLayout { surface, vertices, theta, psi, phi: PhiSampling::Grid(Axis::new(0.0, PI / 2.0, 8)), eps: 0.0 };
        let quad = QuadratureSpec::auto_trimmed(&layout, &volume, 16, 16)?;
        let probe = SymbolProbeConfig::new(Vec3::new(0.03, -0.02, 0.01), radius, dir, PROBE_LADDER.to_vec());
        Ok(ProbeExperiment { volume, layout, weight: WeightSpec::constant(1.0), quad, probe })
    }

    /// Sphere of radius 1.2 around the volume (Tuy's condition holds).
    pub fn sphere(n: usize, window_radius: f64) -> Result<Self> {
        let vertices = VertexSampling::Surface {
            chart: VertexChart::SphereAngular,
            a: Axis::new(0.0, PI, 12),
            b: Axis::new(0.0, 2.0 * PI, 24),
        };
        let surface = DetectorSurface::sphere(Vec3::zeros(), 1.2)?;
        Self::build(n, surface, vertices, window_radius, Vec3::new(1.0, 0.4, 0.7))
    }

    /// Unit disk below the volume, probed along a direction it sees.
    pub fn disk(n: usize, window_radius: f64) -> Result<Self> {
        let vertices = VertexSampling::Surface {
            chart: VertexChart::DiskPolar,
            a: Axis::new(0.0, 1.0, 12),
            b: Axis::new(0.0, 2.0 * PI, 24),
        };
        let surface = DetectorSurface::disk(Vec3::new(0.0, 0.0, -0.8), Vec3::z(), 1.0)?;
        Self::build(n, surface, vertices, window_radius, Vec3::new(1.0, 0.4, 0.3))
    }

    pub fn run(&self) -> Result<SymbolProbe> {
        Ok(symbol_order_probe(&self.probe, &self.volume, &self.layout, &self.weight, &self.quad)?)
    }
}

// ---------------------------------------------------------------------------
// Self-test

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub lines: Vec<String>,
    pub passed: bool,
}

impl SelftestReport {
    pub fn log(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

pub const ADJOINT_TOL: f64 = 1e-10;
pub const ROUNDTRIP_TOL: f64 = 1e-9;
pub const PAIRING_TOL: f64 = 1e-12;

fn random_volume(spec: &VolumeSpec, rng: &mut ChaCha8Rng) -> VolumeGrid {
    spec.from_fn(|_| rng.gen_range(-1.0..1.0))
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Worst relative adjoint mismatch over `pairs` random pairs.
pub fn adjoint_check(
    volume: &VolumeSpec,
    layout: &DataLayout,
    w: &WeightSpec,
    q: &QuadratureSpec,
    pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let f = random_volume(volume, rng);
        let g = ConeDataGrid::new(layout.clone(), (0..layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let af = forward(&f, layout, w, q)?;
        let atg = adjoint(&g, volume, w, q)?;
        let lhs = af.inner(&g)?;
        let rhs = f.inner(&atg);
        worst = worst.max((lhs - rhs).abs() / (f.norm() * g.norm()?));
    }
    Ok(worst)
}

/// Worst relative error of canonical sample-then-recover over random
/// accessible covectors inside the volume box.
pub fn roundtrip_check(surface: &DetectorSurface, volume: &VolumeSpec, count: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let bx = volume.bbox();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut attempts = 0;
    while done < count {
        attempts += 1;
        if attempts > 100 * count {
            return Err(HarnessError::Config("too few accessible covectors for the round-trip check".into()));
        }
        let z = Vec3::new(
            rng.gen_range(bx.min[0]..bx.max[0]),
            rng.gen_range(bx.min[1]..bx.max[1]),
            rng.gen_range(bx.min[2]..bx.max[2]),
        );
        let zeta = random_unit(rng) * rng.gen_range(0.5..5.0);
        let cv = Covector { z, zeta };
        if !is_accessible(surface, &cv) {
            continue;
        }
        let scale = |rec: &Covector| {
            let ez = (rec.z - z).norm() / z.norm().max(1.0);
            let ezeta = (rec.zeta - zeta).norm() / zeta.norm();
            ez.max(ezeta)
        };
        match surface {
            DetectorSurface::Curve(c) => {
                let phi0 = rng.gen_range(0.2..1.3);
                for p in restricted_sample(c, &cv, phi0)? {
                    let (rec, _) = restricted_recover(&p.u, &p.u_prime, &p.beta_chart, p.u_hat, &p.beta_hat, p.phi0)?;
                    worst = worst.max(scale(&rec));
                }
            }
            _ => {
                for p in canonical_sample(surface, &cv, 3, 3, 0.05)? {
                    let (rec, _) = recover_covector(surface, &p.cone)?;
                    worst = worst.max(scale(&rec));
                }
            }
        }
        done += 1;
    }
    Ok(worst)
}

/// Worst `|Lambda^s Lambda^{-s} f - f| / max |f|` for `s = 1`.
pub fn pairing_check(volume: &VolumeSpec, rng: &mut ChaCha8Rng) -> f64 {
    let f = random_volume(volume, rng);
    let back = riesz_precondition(&riesz_precondition(&f, 1.0), -1.0);
    let scale = f.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    back.values.iter().zip(&f.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

/// Runs the adjoint identity, canonical round-trip and `Lambda` pairing
/// checks. The log is a deterministic function of the configuration.
pub fn run_selftest(cfg: &ExperimentConfig) -> Result<SelftestReport> {
    let mut lines = vec![format!("config_hash={}", cfg.hash()), format!("seed={}", cfg.seed)];
    let vol = cfg.volume_spec()?;
    let layout = cfg.layout()?;
    let w = cfg.weight()?;
    let q = cfg.quadrature(&layout, &vol)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut passed = true;
    let mut report = |name: &str, value: f64, tol: f64| {
        let ok = value < tol;
        passed &= ok;
        lines.push(format!("{name} value={value:.17e} tol={tol:e} {}", if ok { "PASS" } else { "FAIL" }));
    };
    let adj = adjoint_check(&vol, &layout, &w, &q, cfg.selftest.adjoint_pairs, &mut rng)?;
    report("adjoint_identity", adj, ADJOINT_TOL);
    let rt = roundtrip_check(&layout.surface, &vol, cfg.selftest.roundtrip_covectors, &mut rng)?;
    report("canonical_roundtrip", rt, ROUNDTRIP_TOL);
    let pair = pairing_check(&vol, &mut rng);
    report("riesz_pairing", pair, PAIRING_TOL);
    lines.push(format!("selftest {}", if passed { "PASS" } else { "FAIL" }));
    Ok(SelftestReport { lines, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_volume_is_accurate() {
        let grid = VolumeSpec::centered_cube(32, 0.5);
        let rho = 0.3;
        let f = make_phantom(&Phantom::ball(Vec3::new(0.02, -0.01, 0.0), rho, 1.0), &grid).unwrap();
        let vol: f64 = f.values.iter().sum::<f64>() * grid.cell_volume();
        let exact = 4.0 / 3.0 * PI * rho.powi(3);
        assert!((vol / exact - 1.0).abs() < 0.02, "{vol} vs {exact}");
    }

    #[test]
    fn zero_amplitude_and_composites() {
        let grid = VolumeSpec::centered_cube(12, 0.5);
        let z = make_phantom(&Phantom::ball(Vec3::zeros(), 0.2, 0.0), &grid).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        let a = Phantom::ball(Vec3::new(-0.2, 0.0, 0.0), 0.15, 1.0);
        let b = Phantom::ball(Vec3::new(0.2, 0.0, 0.0), 0.15, 2.0);
        let both = make_phantom(&Phantom::Composite { parts: vec![a.clone(), b.clone()] }, &grid).unwrap();
        let fa = make_phantom(&a, &grid).unwrap();
        let fb = make_phantom(&b, &grid).unwrap();
        for i in 0..both.values.len() {
            assert_eq!(both.values[i], fa.values[i] + fb.values[i]);
        }
    }

    #[test]
    fn out_of_box_phantom() {
        let grid = VolumeSpec::centered_cube(8, 0.5);
        let err = make_phantom(&Phantom::ball(Vec3::new(0.4, 0.0, 0.0), 0.2, 1.0), &grid).unwrap_err();
        assert!(matches!(err, HarnessError::OutOfBox(_)));
    }

    #[test]
    fn array_roundtrip_is_bit_identical() {
        let grid = VolumeSpec::centered_cube(5, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_volume(&grid, &mut rng);
        let file = ArrayFile::from_volume(&f);
        let back = ArrayFile::from_bytes(&file.to_bytes()).unwrap();
        assert_eq!(back, file);
        let g = back.into_volume(&grid).unwrap();
        assert!(g.values.iter().zip(&f.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_layout() {
        let grid = VolumeSpec::centered_cube(2, 0.5);
        let bytes = ArrayFile::from_volume(&grid.zeros()).to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["kind"], "volume");
        assert_eq!(header["dtype"], "f64");
        assert_eq!(header["order"], "C");
        assert_eq!(bytes.len() - nl - 1, 8 * 8);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let grid = VolumeSpec::centered_cube(3, 0.5);
        let mut bytes = ArrayFile::from_volume(&grid.zeros()).to_bytes();
        bytes.pop();
        assert!(matches!(ArrayFile::from_bytes(&bytes), Err(HarnessError::Format(_))));
    }

    #[test]
    fn mismatched_conedata_names_axis() {
        let cfg = ExperimentConfig::default();
        let layout = cfg.layout().unwrap();
        let mut other = cfg.clone();
        other.grids.data.n_theta += 1;
        let file = ArrayFile::from_conedata(&other.layout().unwrap().zeros());
        let err = file.into_conedata(&layout).unwrap_err().to_string();
        assert!(err.contains("theta"), "{err}");
    }

    #[test]
    fn default_config_resolves() {
        let cfg = ExperimentConfig::default();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn config_errors() {
        let bad = DEFAULT_CONFIG_TOML.replace("kind = \"sphere\"", "kind = \"torus\"");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(HarnessError::Config(_))));
        let unknown = format!("{DEFAULT_CONFIG_TOML}\nbogus = 1\n");
        assert!(ExperimentConfig::from_toml_str(&unknown).is_err());
        // a sphere around the origin with radius 0.6 contains vertices inside the box
        let inside = DEFAULT_CONFIG_TOML.replace("radius = 1.2", "radius = 0.6");
        assert!(ExperimentConfig::from_toml_str(&inside).is_err());
    }

    #[test]
    fn selftest_passes_and_is_deterministic() {
        let cfg = ExperimentConfig::default();
        let a = run_selftest(&cfg).unwrap();
        assert!(a.passed, "{}", a.log());
        let b = run_selftest(&cfg).unwrap();
        assert_eq!(a.log(), b.log());
    }
}
