//! Shared fixtures for the operator benchmarks.

use comptom_core::cone_transform::{sphere_axes, QuadratureSpec};
use comptom_core::{
    make_phantom, Axis, ConeDataGrid, DataLayout, DetectorSurface, Phantom, PhiSampling, Vec3, VertexChart,
    VertexSampling, VolumeGrid, VolumeSpec, WeightSpec,
};
use std::f64::consts::PI;

pub struct Fixture {
    pub volume: VolumeSpec,
    pub layout: DataLayout,
    pub weight: WeightSpec,
    pub quad: QuadratureSpec,
    pub f: VolumeGrid,
    pub g: ConeDataGrid,
}

/// Sphere detector around an `n^3` volume with a smooth bump; data grid
/// 8x16 vertices, 6x12 directions, 6 opening angles.
pub fn sphere_fixture(n: usize) -> Fixture {
    let volume = VolumeSpec::centered_cube(n, 0.5);
    let (theta, psi) = sphere_axes(6, 12);
    let layout = DataLayout {
        surface: DetectorSurface::sphere(Vec3::zeros(), 1.2).unwrap(),
        vertices: VertexSampling::Surface {
            chart: VertexChart::SphereAngular,
            a: Axis::new(0.0, PI, 8),
            b: Axis::new(0.0, 2.0 * PI, 16),
        },
        theta,
        psi,
        phi: PhiSampling::Grid(Axis::new(0.0, PI / 2.0, 6)),
        eps: 0.0,
    };
    let weight = WeightSpec::constant(1.0);
    let quad = QuadratureSpec::auto_trimmed(&layout, &volume, 24, 24).unwrap();
    let f = make_phantom(&Phantom::smooth_bump(Vec3::zeros(), 0.4, 1.0), &volume).unwrap();
    let g = comptom_core::forward(&f, &layout, &weight, &quad).unwrap();
    Fixture { volume, layout, weight, quad, f, g }
}
