//! Injectivity witness for the cone-side projection of the canonical
//! relation: distinct covectors over one cone carry distinct momenta.

use comptom_core::microlocal::{canonical_point, conormal_vertices, CanonicalPoint};
use comptom_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn momenta(p: &CanonicalPoint) -> Vec<f64> {
    let c = &p.cone;
    vec![c.u_hat[0], c.u_hat[1], c.beta_hat[0], c.beta_hat[1], c.phi_hat]
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn distinct_covectors_on_one_cone_have_distinct_momenta() {
    let surface = DetectorSurface::sphere(Vec3::zeros(), 1.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut pairs = 0;
    let mut closest = f64::INFINITY;
    while pairs < 10_000 {
        let z = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let zeta = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let cv = Covector { z, zeta };
        if zeta.norm() < 0.1 || !is_accessible(&surface, &cv) {
            continue;
        }
        let u = conormal_vertices(&surface, &cv, 2).unwrap()[0];
        let phi = rng.gen_range(0.1..1.4);
        let a = canonical_point(&surface, &cv, &u, phi).unwrap();
        let cone = a.as_cone();

        // another covector conormal to the same cone: a second point on its
        // surface with a positive multiple of the conormal direction there
        let z2 = cone.surface_point(rng.gen_range(0.3..2.5), rng.gen_range(0.0..std::f64::consts::TAU));
        let m2 = (z2 - u).normalize();
        let zeta2 = -(cone.axis - m2 * phi.cos()) * rng.gen_range(0.2..5.0);
        let cv2 = Covector { z: z2, zeta: zeta2 };
        let sep = (z2 - z).norm() + (zeta2 - zeta).norm();
        if sep < 1e-9 || surface.chart_for_point(&u).is_err() {
            continue;
        }
        let b = canonical_point(&surface, &cv2, &u, phi).unwrap();
        assert!((b.cone.beta - a.cone.beta).norm() < 1e-12, "second covector must share the cone");
        let d = dist(&momenta(&a), &momenta(&b));
        closest = closest.min(d / sep);
        assert!(d > 1e-9, "covectors {cv:?} and {cv2:?} share cone momenta");
        pairs += 1;
    }
    assert!(closest > 0.0);
}

#[test]
fn recovered_covector_is_unique_per_cone_sample() {
    let surface = DetectorSurface::disk(Vec3::new(0.0, 0.0, -0.8), Vec3::z(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 500 {
        let z = Vec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
        let zeta = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3));
        let cv = Covector { z, zeta };
        if zeta.norm() < 0.1 || !is_accessible(&surface, &cv) {
            continue;
        }
        for p in canonical_sample(&surface, &cv, 3, 2, 0.05).unwrap() {
            let (rec, lambda) = recover_covector(&surface, &p.cone).unwrap();
            assert!((rec.z - z).norm() < 1e-9 && (rec.zeta - zeta).norm() < 1e-9 * zeta.norm());
            assert!((lambda - p.lambda).abs() < 1e-9 * p.lambda);
        }
        checked += 1;
    }
}
