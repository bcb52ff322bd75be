//! Weighted cone (Compton camera) transform on regular grids: forward model and
//! matched adjoint, microlocal visibility analysis and iterative reconstruction.

pub mod cone_transform;
pub mod geometry;
pub mod harness;
pub mod microlocal;
pub mod reconstruct;
pub mod spectral;
pub mod weights;

pub use cone_transform::{
    adjoint, cone_integral, forward, restricted_forward, Axis, ConeDataGrid, DataLayout, PhiSampling, QuadratureSpec,
    TransformError, VertexSampling, VolumeGrid, VolumeSpec,
};
pub use geometry::{Aabb, Cone, Curve, DetectorSurface, DirectionChart, GeometryError, Vec3, VertexChart};
pub use harness::{make_phantom, run_selftest, ArrayFile, ExperimentConfig, HarnessError, Phantom, ProbeExperiment};
pub use microlocal::{
    canonical_sample, disk_invisible, is_accessible, recover_covector, restricted_recover, tuy_check, visibility_map,
    visibility_symbol, Covector, MicrolocalError, VisibilitySymbol,
};
pub use reconstruct::{
    apply_normal, solve, symbol_order_probe, ConeOperator, Preconditioner, ReconstructError, SolverConfig,
    SymbolProbeConfig,
};
pub use spectral::{riesz_precondition, sobolev_norm, sobolev_norm_data};
pub use weights::{eval_weight, AngularWindow, SpatialCutoff, WeightBase, WeightError, WeightSpec};
