//! Periodized Fourier multipliers on regular grids: the Bessel potential
//! `Lambda^sigma = (1 + |xi|^2)^{sigma/2}` and discrete Sobolev norms.
//!
//! Wavenumbers are physical, `xi = 2 pi k / (n h)` with signed index `k`.

use crate::cone_transform::{ConeDataGrid, PhiSampling, Result, VertexSampling, VolumeGrid};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// In-place N-d FFT over a C-order array (unnormalized in both directions).
pub fn fft_nd(data: &mut [Complex<f64>], dims: &[usize], inverse: bool) {
    let mut planner = FftPlanner::new();
    let total: usize = dims.iter().product();
    assert_eq!(data.len(), total);
    for (axis, &n) in dims.iter().enumerate() {
        if n <= 1 {
            continue;
        }
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let stride: usize = dims[axis + 1..].iter().product();
        let outer = total / (n * stride);
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                for (i, c) in line.iter_mut().enumerate() {
                    *c = data[base + i * stride];
                }
                fft.process(&mut line);
                for (i, c) in line.iter().enumerate() {
                    data[base + i * stride] = *c;
                }
            }
        }
    }
}

/// Physical wavenumber of DFT bin `i` on an axis of `n` samples with step `h`.
#[inline]
pub fn wavenumber(i: usize, n: usize, h: f64) -> f64 {
    let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    2.0 * PI * k / (n as f64 * h)
}

/// `|xi|^2` for every bin of a C-order grid.
fn xi_squared(dims: &[usize], steps: &[f64]) -> Vec<f64> {
    let per_axis: Vec<Vec<f64>> = dims
        .iter()
        .zip(steps)
        .map(|(&n, &h)| (0..n).map(|i| wavenumber(i, n, h).powi(2)).collect())
        .collect();
    let total: usize = dims.iter().product();
    let mut out = vec![0.0; total];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut acc = 0.0;
        for a in (0..dims.len()).rev() {
            acc += per_axis[a][rem % dims[a]];
            rem /= dims[a];
        }
        *o = acc;
    }
    out
}

/// Applies `(1 + |xi|^2)^{sigma/2}` to a volume on its periodized grid.
pub fn riesz_precondition(f: &VolumeGrid, sigma: f64) -> VolumeGrid {
    if sigma == 0.0 {
        return f.clone();
    }
    let dims = f.spec.dims;
    let h = f.spec.spacing;
    let mut buf: Vec<Complex<f64>> = f.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_nd(&mut buf, &dims, false);
    let n = buf.len() as f64;
    for (c, x2) in buf.iter_mut().zip(xi_squared(&dims, &[h; 3])) {
        *c *= (1.0 + x2).powf(0.5 * sigma) / n;
    }
    fft_nd(&mut buf, &dims, true);
    VolumeGrid { spec: f.spec, values: buf.into_iter().map(|c| c.re).collect() }
}

fn weighted_spectral_norm(values: impl Iterator<Item = f64>, dims: &[usize], steps: &[f64], s: f64) -> f64 {
    let mut buf: Vec<Complex<f64>> = values.map(|v| Complex::new(v, 0.0)).collect();
    fft_nd(&mut buf, dims, false);
    let n = buf.len() as f64;
    let sum: f64 = buf.iter().zip(xi_squared(dims, steps)).map(|(c, x2)| (1.0 + x2).powf(s) * c.norm_sqr()).sum();
    (sum / n).sqrt()
}

/// Discrete `H^s` norm; `s = 0` is the grid norm `(sum f^2 dz^3)^{1/2}`.
pub fn sobolev_norm(f: &VolumeGrid, s: f64) -> f64 {
    let h = f.spec.spacing;
    let cell = f.spec.cell_volume();
    weighted_spectral_norm(f.values.iter().map(|v| v * cell.sqrt()), &f.spec.dims, &[h; 3], s)
}

/// Anisotropic data-space surrogate for `H^s` on the cone manifold: every
/// sampled axis (vertex chart, theta, psi, phi) is treated spectrally with its
/// own step, after weighting by `sqrt(w_data)`. `s = 0` is the data norm.
pub fn sobolev_norm_data(g: &ConeDataGrid, s: f64) -> Result<f64> {
    let layout = &g.layout;
    let measure = layout.measure()?;
    let (ha, hb) = match &layout.vertices {
        VertexSampling::Surface { a, b, .. } => (a.step(), b.step()),
        VertexSampling::Curve { t } => (t.step(), 1.0),
    };
    let hphi = match layout.phi {
        PhiSampling::Grid(ax) => ax.step(),
        PhiSampling::Fixed(_) => 1.0,
    };
    let steps = [ha, hb, layout.theta.step(), layout.psi.step(), hphi];
    Ok(weighted_spectral_norm(
        g.values.iter().zip(&measure).map(|(v, w)| v * w.sqrt()),
        &layout.dims(),
        &steps,
        s,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone_transform::VolumeSpec;
    use crate::geometry::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(spec: &VolumeSpec, seed: u64) -> VolumeGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec.from_fn(|_| rng.gen_range(-1.0..1.0))
    }

    fn mode(spec: &VolumeSpec, k: [i32; 3]) -> VolumeGrid {
        let l = spec.spacing * spec.dims[0] as f64;
        spec.from_fn(|z| {
            let p = (0..3).map(|a| k[a] as f64 * (z[a] - spec.origin[a])).sum::<f64>();
            (2.0 * PI * p / l).cos()
        })
    }

    #[test]
    fn sigma_zero_and_dc_mode() {
        let spec = VolumeSpec::centered_cube(8, 0.5);
        let f = random(&spec, 1);
        assert_eq!(riesz_precondition(&f, 0.0), f);
        let c = spec.from_fn(|_| 2.5);
        for sigma in [-3.0, 1.0, 2.5] {
            let out = riesz_precondition(&c, sigma);
            assert!(out.values.iter().all(|v| (v - 2.5).abs() < 1e-13));
        }
    }

    #[test]
    fn single_mode_gain() {
        let spec = VolumeSpec::centered_cube(16, 0.5);
        let l = spec.spacing * 16.0;
        for k in [[1, 0, 0], [2, 3, 0], [1, -2, 4]] {
            let f = mode(&spec, k);
            let ks = (k.iter().map(|&v| (v * v) as f64).sum::<f64>()).sqrt();
            let xi2 = (2.0 * PI * ks / l).powi(2);
            for sigma in [-2.0, 1.0, 3.5] {
                let out = riesz_precondition(&f, sigma);
                let gain = (1.0 + xi2).powf(sigma / 2.0);
                let err = out.values.iter().zip(&f.values).map(|(a, b)| (a - gain * b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-12 * gain.max(1.0), "sigma {sigma}: {err}");
            }
            for s in [-1.0, 0.5, 2.0] {
                let ratio = sobolev_norm(&f, s) / sobolev_norm(&f, 0.0);
                let expect = (1.0 + xi2).powf(s / 2.0);
                assert!((ratio / expect - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn inverse_pairing() {
        let h = 1.0 / 15.0;
        let spec = VolumeSpec { origin: Vec3::zeros(), spacing: h, dims: [8, 10, 6] };
        let f = random(&spec, 3);
        let max_err = |sigma: f64| {
            let back = riesz_precondition(&riesz_precondition(&f, sigma), -sigma);
            back.values.iter().zip(&f.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        for sigma in [0.5, 1.0, -1.0, 2.0] {
            assert!(max_err(sigma) < 1e-12, "sigma {sigma}: {}", max_err(sigma));
        }
        // beyond that the round trip is limited by the multiplier's condition number
        let kappa = (1.0 + 3.0 * (PI / h).powi(2)).powf(4.0 / 2.0);
        assert!(max_err(4.0) < 1e-14 * kappa);
    }

    #[test]
    fn l2_parseval() {
        let spec = VolumeSpec::centered_cube(9, 0.5);
        let f = random(&spec, 5);
        let rel = (sobolev_norm(&f, 0.0) - f.norm()).abs() / f.norm();
        assert!(rel < 1e-12);
    }

    #[test]
    fn norm_is_monotone_in_s() {
        for seed in 0..5 {
            let f = random(&VolumeSpec::centered_cube(8, 0.5), seed);
            let mut prev = 0.0;
            for s in [-2.0, -1.0, 0.0, 0.5, 1.0, 3.0] {
                let n = sobolev_norm(&f, s);
                assert!(n >= prev);
                prev = n;
            }
        }
    }
}
