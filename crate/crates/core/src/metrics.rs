//! Image-quality metrics on scaled-and-unbiased reconstructions.
//!
//! A reconstruction is first mapped through the least-squares affine fit
//! `a * x + b` onto the ground truth; RRA, PSNR and SSIM are then computed on
//! the fitted volume. PSNR and SSIM take their dynamic range `L` from the
//! ground truth (`max - min`).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub a: f64,
    pub b: f64,
    pub rra: f64,
    /// `f64::INFINITY` when the fitted reconstruction equals the truth.
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct AffineFit {
    pub fitted: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("metric inputs have lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Closed-form minimizer of `|truth - a * recon - b|_2` over `(a, b)`.
pub fn fit_affine(recon: &[f64], truth: &[f64]) -> Result<AffineFit> {
    check_len(recon, truth)?;
    let n = recon.len() as f64;
    let mr = recon.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (r, t) in recon.iter().zip(truth) {
        cov += (r - mr) * (t - mt);
        var += (r - mr) * (r - mr);
    }
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Degenerate("reconstruction is constant; affine fit undefined".into()));
    }
    let a = cov / var;
    let b = mt - a * mr;
    Ok(AffineFit { fitted: recon.iter().map(|r| a * r + b).collect(), a, b })
}

/// Relative reconstruction accuracy `|x_r - x*| / |x*|`.
pub fn rra(recon: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(recon, truth)?;
    let den = truth.iter().map(|t| t * t).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::Degenerate("ground truth is zero".into()));
    }
    let num = recon.iter().zip(truth).map(|(r, t)| (r - t) * (r - t)).sum::<f64>().sqrt();
    Ok(num / den)
}

fn dynamic_range(truth: &[f64]) -> f64 {
    let max = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = truth.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// `10 log10(L^2 / MSE)` with `L` the ground-truth dynamic range.
pub fn psnr(recon: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(recon, truth)?;
    let l = dynamic_range(truth);
    if !(l > 0.0) {
        return Err(Error::Degenerate("ground truth has zero dynamic range".into()));
    }
    let mse = recon.iter().zip(truth).map(|(r, t)| (r - t) * (r - t)).sum::<f64>() / recon.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (l * l / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub sigma: f64,
    /// Window edge length (odd).
    pub support: usize,
    pub k1: f64,
    pub k2: f64,
    /// Overrides the dynamic range taken from the second argument.
    pub data_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { sigma: 1.5, support: 7, k1: 0.01, k2: 0.03, data_range: None }
    }
}

/// Separable valid-mode filtering with a 1-D kernel along each axis.
fn filter_valid(data: &[f64], dims: [usize; 3], kernel: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let k = kernel.len();
    let mut cur = data.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let mut nd = d;
        nd[axis] = d[axis] + 1 - k;
        let stride = match axis {
            0 => 1,
            1 => d[0],
            _ => d[0] * d[1],
        };
        let mut out = vec![0.0; nd[0] * nd[1] * nd[2]];
        for z in 0..nd[2] {
            for y in 0..nd[1] {
                for x in 0..nd[0] {
                    let base = x + d[0] * (y + d[1] * z);
                    let mut acc = 0.0;
                    for (j, w) in kernel.iter().enumerate() {
                        acc += w * cur[base + j * stride];
                    }
                    out[x + nd[0] * (y + nd[1] * z)] = acc;
                }
            }
        }
        cur = out;
        d = nd;
    }
    (cur, d)
}

/// Mean local SSIM over all voxels whose Gaussian window fits inside the volume.
pub fn ssim3d(recon: &Volume, truth: &Volume, params: &SsimParams) -> Result<f64> {
    if recon.dims() != truth.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", recon.dims(), truth.dims())));
    }
    let dims = truth.dims();
    if params.support.is_multiple_of(2) || dims.iter().any(|&n| n < params.support) {
        return Err(Error::Shape(format!("volume {dims:?} smaller than the {}^3 SSIM window", params.support)));
    }
    let l = params.data_range.unwrap_or_else(|| dynamic_range(truth.data()));
    if !(l > 0.0) {
        return Err(Error::Degenerate("zero dynamic range for SSIM".into()));
    }
    let half = (params.support / 2) as f64;
    let mut kernel: Vec<f64> = (0..params.support)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * params.sigma * params.sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= s);

    let x = recon.data();
    let y = truth.data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, _) = filter_valid(x, dims, &kernel);
    let (my, _) = filter_valid(y, dims, &kernel);
    let (mxx, _) = filter_valid(&xx, dims, &kernel);
    let (myy, _) = filter_valid(&yy, dims, &kernel);
    let (mxy, _) = filter_valid(&xy, dims, &kernel);
    let c1 = (params.k1 * l).powi(2);
    let c2 = (params.k2 * l).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Affine fit followed by RRA, PSNR and SSIM against the truth.
pub fn evaluate(recon: &Volume, truth: &Volume) -> Result<MetricsReport> {
    if recon.dims() != truth.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", recon.dims(), truth.dims())));
    }
    let fit = fit_affine(recon.data(), truth.data())?;
    let fitted = Volume::new(truth.dims(), truth.spacing(), fit.fitted)?;
    Ok(MetricsReport {
        a: fit.a,
        b: fit.b,
        rra: rra(fitted.data(), truth.data())?,
        psnr: psnr(fitted.data(), truth.data())?,
        ssim: ssim3d(&fitted, truth, &SsimParams::default())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, PhantomConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn truth() -> Volume {
        generate_phantom([16, 16, 16], &PhantomConfig::default().with_seed(5)).unwrap()
    }

    #[test]
    fn affine_recovery() {
        let t = truth();
        let xbar: Vec<f64> = t.data().iter().map(|v| (v - 5.0) / 2.0).collect();
        let fit = fit_affine(&xbar, t.data()).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-12 && (fit.b - 5.0).abs() < 1e-12);
        assert!(rra(&fit.fitted, t.data()).unwrap() < 1e-14);
        let same = fit_affine(t.data(), t.data()).unwrap();
        assert!((same.a - 1.0).abs() < 1e-12 && same.b.abs() < 1e-12);
    }

    #[test]
    fn affine_rejects_constant() {
        assert!(matches!(fit_affine(&[1.0; 8], &[0.5; 8]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn affine_matches_grid_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = r.iter().map(|v| 0.7 * v + 0.2 + rng.random_range(-0.3..0.3)).collect();
        let obj = |a: f64, b: f64| r.iter().zip(&t).map(|(x, y)| (y - a * x - b).powi(2)).sum::<f64>();
        // coarse-to-fine grid search, independent of the closed form
        let (mut a, mut b, mut h) = (0.0, 0.0, 1.0);
        while h > 1e-11 {
            let mut best = (obj(a, b), a, b);
            for i in -10..=10 {
                for j in -10..=10 {
                    let (ca, cb) = (a + i as f64 * h, b + j as f64 * h);
                    let v = obj(ca, cb);
                    if v < best.0 {
                        best = (v, ca, cb);
                    }
                }
            }
            a = best.1;
            b = best.2;
            h /= 4.0;
        }
        let fit = fit_affine(&r, &t).unwrap();
        assert!((fit.a - a).abs() < 1e-8 && (fit.b - b).abs() < 1e-8, "{a} {b} vs {} {}", fit.a, fit.b);
    }

    #[test]
    fn rra_values() {
        let t = truth();
        let z = vec![0.0; t.len()];
        let two: Vec<f64> = t.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(rra(t.data(), t.data()).unwrap(), 0.0);
        assert!((rra(&z, t.data()).unwrap() - 1.0).abs() < 1e-15);
        assert!((rra(&two, t.data()).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(rra(t.data(), &z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn psnr_values() {
        let t = [0.0, 1.0, 0.0, 1.0];
        assert_eq!(psnr(&t, &t).unwrap(), f64::INFINITY);
        // every voxel off by L = 1: MSE = L^2
        assert!(psnr(&[1.0, 0.0, 1.0, 0.0], &t).unwrap().abs() < 1e-12);
        let e1 = psnr(&[0.2, 1.0, 0.0, 1.0], &t).unwrap();
        let e2 = psnr(&[0.1, 1.0, 0.0, 1.0], &t).unwrap();
        assert!((e2 - e1 - 20.0 * 2f64.log10()).abs() < 1e-10);
        assert!(psnr(&[1.0; 4], &[2.0; 4]).is_err());
    }

    #[test]
    fn ssim_identity_offset_and_symmetry() {
        let t = truth();
        assert!((ssim3d(&t, &t, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let l = 1.0;
        let shifted = Volume::new(t.dims(), 1.0, t.data().iter().map(|v| v + 0.01 * l).collect()).unwrap();
        let s = ssim3d(&shifted, &t, &SsimParams::default()).unwrap();
        assert!(s < 1.0 && s > 0.9, "ssim {s}");
        let fixed = SsimParams { data_range: Some(1.0), ..SsimParams::default() };
        let other = generate_phantom([16, 16, 16], &PhantomConfig::default().with_seed(6)).unwrap();
        let ab = ssim3d(&t, &other, &fixed).unwrap();
        let ba = ssim3d(&other, &t, &fixed).unwrap();
        assert!((ab - ba).abs() < 1e-14);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_window_too_large() {
        let v = Volume::zeros([6, 8, 8]);
        assert!(matches!(ssim3d(&v, &v, &SsimParams::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn affine_invariance_of_rra() {
        let t = truth();
        for (a0, b0) in [(3.0, -1.0), (-0.5, 2.0), (1e-3, 0.0)] {
            let c: Vec<f64> = t.data().iter().map(|v| a0 * v + b0).collect();
            let fit = fit_affine(&c, t.data()).unwrap();
            assert!(rra(&fit.fitted, t.data()).unwrap() < 1e-9);
        }
    }
}
