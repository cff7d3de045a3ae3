use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::MeasurementSet;
use crate::error::{Error, Result};

/// Adds i.i.d. Gaussian noise with standard deviation `sigma * max(data)`.
/// Falls back to the largest magnitude when the data has no positive entry.
pub fn add_noise(m: &MeasurementSet, sigma: f64, seed: u64) -> Result<MeasurementSet> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise level must be non-negative, got {sigma}")));
    }
    let mut out = m.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let peak = m.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let peak = if peak > 0.0 { peak } else { m.data.iter().map(|v| v.abs()).fold(0.0, f64::max) };
    let std = sigma * peak;
    if std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut out.data {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::{build_geometry, TimeConfig};

    fn fake(n: usize) -> MeasurementSet {
        let g = build_geometry(10, 10, 1.0, [0.0; 3]).unwrap();
        let t = TimeConfig { c0: 1.0, dt: 0.1, n_t: n, n_dirs: 10 };
        let data = (0..g.len() * n).map(|i| ((i as f64) * 0.01).sin() * 2.0).collect();
        MeasurementSet::new(g, t, data).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let m = fake(5);
        assert_eq!(add_noise(&m, 0.0, 3).unwrap(), m);
    }

    #[test]
    fn empirical_std_matches() {
        let m = fake(1200);
        let peak = m.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let noisy = add_noise(&m, 0.05, 11).unwrap();
        let n = m.data.len() as f64;
        assert!(n >= 1e5);
        let diffs: Vec<f64> = noisy.data.iter().zip(&m.data).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std / (0.05 * peak) - 1.0).abs() < 0.05, "std {std}");
        assert_eq!(noisy, add_noise(&m, 0.05, 11).unwrap());
    }
}
