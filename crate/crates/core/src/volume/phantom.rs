//! Synthetic vessel phantoms: a union (pointwise max) of tubes with Gaussian
//! cross-section following random quadratic Bezier curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

/// Profile is cut to zero beyond this many radii from the centerline.
const CUTOFF_RADII: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Inclusive range for the number of tubes.
    pub n_tubes: (usize, usize),
    /// Gaussian cross-section radius (standard deviation), in voxels.
    pub radius_range: (f64, f64),
    pub intensity_range: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { n_tubes: (3, 12), radius_range: (0.5, 2.0), intensity_range: (0.5, 1.0), seed: 0 }
    }
}

impl PhantomConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.n_tubes.0 > self.n_tubes.1 {
            return Err(Error::Config(format!("n_tubes range {:?} is not ordered", self.n_tubes)));
        }
        if !ordered(self.radius_range) || self.radius_range.0 <= 0.0 {
            return Err(Error::Config(format!("bad radius range {:?}", self.radius_range)));
        }
        let (lo, hi) = self.intensity_range;
        if !ordered(self.intensity_range) || lo < 0.0 || hi > 1.0 {
            return Err(Error::Config(format!(
                "intensity range {:?} must be ordered within [0, 1]",
                self.intensity_range
            )));
        }
        Ok(())
    }
}

struct Tube {
    polyline: Vec<[f64; 3]>,
    radius: f64,
    intensity: f64,
}

fn bezier(p0: [f64; 3], p1: [f64; 3], p2: [f64; 3], t: f64) -> [f64; 3] {
    let u = 1.0 - t;
    std::array::from_fn(|a| u * u * p0[a] + 2.0 * u * t * p1[a] + t * t * p2[a])
}

fn dist_sq_to_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (0..3).map(|k| (ap[k] - t * ab[k]).powi(2)).sum()
}

pub fn generate_phantom(dims: [usize; 3], config: &PhantomConfig) -> Result<Volume> {
    if dims.iter().any(|&n| n < 8) {
        return Err(Error::Config(format!("phantom dims {dims:?} must be at least 8 per axis")));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_tubes = rng.random_range(config.n_tubes.0..=config.n_tubes.1);
    let hi = dims.map(|n| (n - 1) as f64);
    let segments = 8 * dims.iter().max().unwrap();

    let tubes: Vec<Tube> = (0..n_tubes)
        .map(|_| {
            let mut point = || -> [f64; 3] { std::array::from_fn(|a| rng.random_range(0.0..=hi[a])) };
            let (p0, p1, p2) = (point(), point(), point());
            let polyline = (0..=segments).map(|s| bezier(p0, p1, p2, s as f64 / segments as f64)).collect();
            let radius = rng.random_range(config.radius_range.0..=config.radius_range.1);
            let intensity = rng.random_range(config.intensity_range.0..=config.intensity_range.1);
            Tube { polyline, radius, intensity }
        })
        .collect();

    let mut v = Volume::zeros(dims);
    for tube in &tubes {
        let reach = CUTOFF_RADII * tube.radius;
        let mut lo = [f64::INFINITY; 3];
        let mut up = [f64::NEG_INFINITY; 3];
        for q in &tube.polyline {
            for a in 0..3 {
                lo[a] = lo[a].min(q[a] - reach);
                up[a] = up[a].max(q[a] + reach);
            }
        }
        let range = |a: usize| {
            let s = lo[a].ceil().max(0.0) as usize;
            let e = (up[a].floor().min(hi[a]) as usize).max(s);
            s..=e
        };
        let inv2r2 = 1.0 / (2.0 * tube.radius * tube.radius);
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let p = [x as f64, y as f64, z as f64];
                    let d2 = tube
                        .polyline
                        .windows(2)
                        .map(|w| dist_sq_to_segment(p, w[0], w[1]))
                        .fold(f64::INFINITY, f64::min);
                    if d2 > reach * reach {
                        continue;
                    }
                    let val = tube.intensity * (-d2 * inv2r2).exp();
                    let i = v.index(x, y, z);
                    let cur = &mut v.data_mut()[i];
                    if val > *cur {
                        *cur = val;
                    }
                }
            }
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_tubes_gives_zero_volume() {
        let cfg = PhantomConfig { n_tubes: (0, 0), ..PhantomConfig::default() };
        let v = generate_phantom([8, 8, 8], &cfg).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = PhantomConfig::default().with_seed(42);
        let a = generate_phantom([16, 16, 16], &cfg).unwrap();
        let b = generate_phantom([16, 16, 16], &cfg).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = generate_phantom([16, 16, 16], &cfg.with_seed(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_small_is_rejected() {
        let r = generate_phantom([16, 7, 16], &PhantomConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn values_in_unit_interval() {
        for seed in 0..20 {
            let v = generate_phantom([12, 10, 9], &PhantomConfig::default().with_seed(seed)).unwrap();
            assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn reference_nonzero_fraction() {
        let v = generate_phantom([16, 16, 16], &PhantomConfig::default().with_seed(1)).unwrap();
        let nz = v.data().iter().filter(|&&x| x != 0.0).count();
        let frac = nz as f64 / v.len() as f64;
        let bright = v.data().iter().filter(|&&x| x > 0.25).count();
        assert_eq!((nz, bright), (2228, 1502), "fraction {frac}");
    }
}
