//! Smoothed total-variation baseline.
//!
//! `TV_ε(x) = Σ_v sqrt(|∇x(v)|² + ε²)` with forward differences and replicate
//! boundary (the difference across the far face is zero). Reconstruction uses
//! the same incremental gradient scheme as the flow prior, with TV in place of
//! `R`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fit_affine, rra};
use crate::solver::{inner_loop, Problem, Regularizer, StepSizes};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvConfig {
    pub eps: f64,
    pub lambda: f64,
    pub steps: usize,
    /// Grid of `λ_TV` for sweeps.
    pub lambda_grid: Vec<f64>,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self { eps: 1e-6, lambda: 1e-3, steps: 200, lambda_grid: (-6..=0).map(|k| 10f64.powi(k)).collect() }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !(self.lambda >= 0.0) || self.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("TV needs eps > 0 and non-negative weights".into()));
        }
        Ok(())
    }
}

/// Smoothed isotropic TV and its exact gradient.
pub fn tv_value_and_grad(x: &Volume, eps: f64) -> (f64, Volume) {
    let [nx, ny, nz] = x.dims();
    let d = x.data();
    let mut g = vec![0.0; d.len()];
    let mut value = 0.0;
    let e2 = eps * eps;
    for z in 0..nz {
        for y in 0..ny {
            for xx in 0..nx {
                let i = x.index(xx, y, z);
                let dx = if xx + 1 < nx { d[i + 1] - d[i] } else { 0.0 };
                let dy = if y + 1 < ny { d[i + nx] - d[i] } else { 0.0 };
                let dz = if z + 1 < nz { d[i + nx * ny] - d[i] } else { 0.0 };
                let phi = (dx * dx + dy * dy + dz * dz + e2).sqrt();
                value += phi;
                let (gx, gy, gz) = (dx / phi, dy / phi, dz / phi);
                g[i] -= gx + gy + gz;
                if xx + 1 < nx {
                    g[i + 1] += gx;
                }
                if y + 1 < ny {
                    g[i + nx] += gy;
                }
                if z + 1 < nz {
                    g[i + nx * ny] += gz;
                }
            }
        }
    }
    (value, Volume::new(x.dims(), x.spacing(), g).expect("same shape"))
}

/// TV as a [`Regularizer`].
#[derive(Debug, Clone, Copy)]
pub struct TotalVariation {
    pub eps: f64,
}

impl Regularizer for TotalVariation {
    fn value(&mut self, x: &Volume) -> Result<f64> {
        Ok(tv_value_and_grad(x, self.eps).0)
    }

    fn value_and_grad(&mut self, x: &Volume) -> Result<(f64, Volume)> {
        Ok(tv_value_and_grad(x, self.eps))
    }
}

/// Descent on `½‖Fx − y‖² + λ_TV TV_ε(x)` from `x0`.
pub fn reconstruct_tv(problem: &Problem, x0: &Volume, config: &TvConfig, steps: StepSizes) -> Result<Volume> {
    config.validate()?;
    let mut tv = TotalVariation { eps: config.eps };
    Ok(inner_loop(problem, &mut tv, x0, config.lambda, steps, config.steps, false)?.x)
}

/// One point of a `λ_TV` sweep.
#[derive(Debug, Clone)]
pub struct TvSweepPoint {
    pub lambda: f64,
    pub rra: f64,
    pub x: Volume,
}

/// Runs TV for every `λ` in the grid and scores each result by the RRA of its
/// affine fit to `truth`. Returns all points and the index of the best one.
pub fn tv_sweep(
    problem: &Problem,
    x0: &Volume,
    truth: &Volume,
    config: &TvConfig,
    steps: StepSizes,
) -> Result<(Vec<TvSweepPoint>, usize)> {
    if config.lambda_grid.is_empty() {
        return Err(Error::Config("empty TV lambda grid".into()));
    }
    let mut points = Vec::with_capacity(config.lambda_grid.len());
    for &lambda in &config.lambda_grid {
        let cfg = TvConfig { lambda, ..config.clone() };
        let x = reconstruct_tv(problem, x0, &cfg, steps)?;
        let fit = fit_affine(x.data(), truth.data())?;
        let score = rra(&fit.fitted, truth.data())?;
        log::info!("TV lambda {lambda:.1e}: RRA {score:.4}");
        points.push(TvSweepPoint { lambda, rra: score, x });
    }
    let best = points.iter().enumerate().min_by(|a, b| a.1.rra.total_cmp(&b.1.rra)).map(|(i, _)| i).unwrap();
    Ok((points, best))
}
