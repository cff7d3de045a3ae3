//! Random affine augmentation (scale, rotation, flip, shift) with trilinear
//! resampling about the volume center, followed by Gaussian jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    /// Per-axis rotation angle range in degrees.
    pub rotation_range_deg: (f64, f64),
    pub allow_flips: bool,
    /// Maximum shift per axis as a fraction of the axis length.
    pub max_shift_frac: f64,
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.8, 1.2),
            rotation_range_deg: (0.0, 90.0),
            allow_flips: true,
            max_shift_frac: 0.1,
            jitter_sigma: 0.01,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// The configuration that leaves every volume untouched.
    pub fn identity() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            rotation_range_deg: (0.0, 0.0),
            allow_flips: false,
            max_shift_frac: 0.0,
            jitter_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::Config(format!("scale range {:?} must be positive and ordered", self.scale_range)));
        }
        let (r0, r1) = self.rotation_range_deg;
        if !(0.0 <= r0 && r0 <= r1 && r1 < 360.0) {
            return Err(Error::Config(format!(
                "rotation range {:?} must be ordered within [0, 360)",
                self.rotation_range_deg
            )));
        }
        if !(0.0..=0.5).contains(&self.max_shift_frac) {
            return Err(Error::Config(format!("max_shift_frac {} outside [0, 0.5]", self.max_shift_frac)));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config(format!("jitter_sigma {} must be non-negative", self.jitter_sigma)));
        }
        Ok(())
    }
}

/// One concrete affine transform. The forward map sends an input point `p` to
/// `c + R * s * F * (p - c) + shift`, with `F` the flip diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale: f64,
    /// Rotation angles about x, y, z in degrees; composed as `Rz * Ry * Rx`.
    pub angles_deg: [f64; 3],
    pub flips: [bool; 3],
    pub shift: [f64; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        Self { scale: 1.0, angles_deg: [0.0; 3], flips: [false; 3], shift: [0.0; 3] }
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        let [a, b, g] = self.angles_deg.map(f64::to_radians);
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sg, cg) = g.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
        matmul(&rz, &matmul(&ry, &rx))
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Resamples `v` under the transform; points mapped from outside the grid read zero.
pub fn apply_affine(v: &Volume, params: &AffineParams) -> Volume {
    let dims = v.dims();
    let c = v.center_voxel();
    let r = params.rotation();
    let flip = params.flips.map(|f| if f { -1.0 } else { 1.0 });
    let inv_s = 1.0 / params.scale;
    let mut out = Vec::with_capacity(v.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d = [
                    x as f64 - c[0] - params.shift[0],
                    y as f64 - c[1] - params.shift[1],
                    z as f64 - c[2] - params.shift[2],
                ];
                // R^T d
                let rt: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| r[k][i] * d[k]).sum());
                let p: [f64; 3] = std::array::from_fn(|i| c[i] + flip[i] * rt[i] * inv_s);
                out.push(v.trilinear_sample(p));
            }
        }
    }
    Volume::from_raw(dims, v.spacing(), out)
}

fn draw_params(dims: [usize; 3], config: &AugmentConfig, rng: &mut ChaCha8Rng) -> AffineParams {
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..hi) } else { lo };
    let scale = uniform(rng, config.scale_range);
    let angles_deg = std::array::from_fn(|_| uniform(rng, config.rotation_range_deg));
    let flips = std::array::from_fn(|_| config.allow_flips && rng.random_bool(0.5));
    let shift = std::array::from_fn(|a| {
        let m = config.max_shift_frac * dims[a] as f64;
        uniform(rng, (-m, m))
    });
    AffineParams { scale, angles_deg, flips, shift }
}

pub fn augment(v: &Volume, config: &AugmentConfig) -> Result<Volume> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = draw_params(v.dims(), config, &mut rng);
    let mut out = if params == AffineParams::identity() { v.clone() } else { apply_affine(v, &params) };
    if config.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, config.jitter_sigma).expect("validated sigma");
        for x in out.data_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    Ok(out)
}
