//! MAP reconstruction with a learned prior.
//!
//! The objective is `L(x; λ, y) = ½‖Fx − y‖² + λ R(x)`. For fixed `λ` it is
//! minimized by incremental gradient descent, alternating a step on the data
//! term with a step on the regularizer. The adaptive outer loop moves `λ`
//! inside a bracket until `R(x_λ)` matches the reference constant `C`.

mod adaptive;
mod prior;

pub use adaptive::{
    adaptive_loop, bracket_search, bracket_search_with, outer_iteration_bound, reconstruct_adaptive, update_bracket,
    verify_bracket, write_trace_csv, AdaptiveResult, Bracket, OuterRecord, ReconstructionTrace, StopReason,
};
pub use prior::{
    all_offsets, hessian_norm, patch_value, patch_value_and_grad, random_offsets, tiling_offsets, FlowPrior,
    PatchConfig, Regularizer,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sq, power_iteration_history, LinearOperator};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialGuess {
    Zero,
    /// `a F*y` with `a` minimizing `‖a F F*y − y‖`.
    AdjointScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    /// Inner iterations `J` per outer iteration.
    pub inner_steps: usize,
    pub outer_max: usize,
    /// Data step `s`; `None` means `0.9 / L̂` with `L̂` from power iteration.
    pub data_step: Option<f64>,
    /// Regularizer step `t`; `None` means `t = s`.
    pub reg_step: Option<f64>,
    pub beta: f64,
    /// Consistency tolerance; `None` means `0.05 |C|`.
    pub eps1: Option<f64>,
    /// Bracket-width tolerance; `None` means `1e-3 (u0 − l0)`.
    pub eps2: Option<f64>,
    pub lambda_start: f64,
    pub expansion: f64,
    pub max_expansions: usize,
    pub initial_guess: InitialGuess,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            inner_steps: 50,
            outer_max: 20,
            data_step: None,
            reg_step: None,
            beta: 0.5,
            eps1: None,
            eps2: None,
            lambda_start: 1e-3,
            expansion: 10.0,
            max_expansions: 12,
            initial_guess: InitialGuess::Zero,
            power_iters: 30,
            seed: 0,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: Option<f64>| v.is_none_or(|v| v > 0.0 && v.is_finite());
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if !pos(self.data_step) || !pos(self.reg_step) || !pos(self.eps2) {
            return Err(Error::Config("step sizes and tolerances must be positive".into()));
        }
        if self.eps1.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::Config("eps1 must be positive".into()));
        }
        if self.inner_steps == 0 || self.power_iters == 0 {
            return Err(Error::Config("inner_steps and power_iters must be at least 1".into()));
        }
        if !(self.lambda_start > 0.0) || !(self.expansion > 1.0) {
            return Err(Error::Config("lambda_start must be positive and expansion above 1".into()));
        }
        Ok(())
    }
}

/// Step sizes of the two half-steps.
///
/// At a given `λ` both steps are scaled by `1 / (1 + λ damping)`. With
/// `damping = L_R / L̂` this gives `s = t = 0.9 / (L̂ + λ L_R)`, which keeps the
/// regularizer half-step stable for large `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub data: f64,
    pub reg: f64,
    pub damping: f64,
}

impl StepSizes {
    pub fn fixed(data: f64, reg: f64) -> Self {
        Self { data, reg, damping: 0.0 }
    }

    /// Effective `(s, t)` at `λ`.
    pub fn at(&self, lambda: f64) -> (f64, f64) {
        let rho = 1.0 / (1.0 + lambda.abs() * self.damping);
        (self.data * rho, self.reg * rho)
    }
}

/// A linear inverse problem `F x ≈ y` on a fixed grid.
pub struct Problem<'a> {
    pub op: &'a dyn LinearOperator,
    pub y: &'a [f64],
    pub dims: [usize; 3],
    pub spacing: f64,
}

impl<'a> Problem<'a> {
    pub fn new(op: &'a dyn LinearOperator, y: &'a [f64], dims: [usize; 3], spacing: f64) -> Result<Self> {
        if op.domain_len() != dims.iter().product::<usize>() || op.range_len() != y.len() {
            return Err(Error::Shape(format!(
                "operator {}x{} does not match data length {} and grid {dims:?}",
                op.range_len(),
                op.domain_len(),
                y.len()
            )));
        }
        Ok(Self { op, y, dims, spacing })
    }

    fn check(&self, x: &Volume) -> Result<()> {
        if x.dims() != self.dims {
            return Err(Error::Shape(format!("volume dims {:?} do not match problem dims {:?}", x.dims(), self.dims)));
        }
        Ok(())
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.op.apply(x);
        for (ri, yi) in r.iter_mut().zip(self.y) {
            *ri -= yi;
        }
        r
    }

    /// `½‖Fx − y‖²`.
    pub fn misfit(&self, x: &Volume) -> Result<f64> {
        self.check(x)?;
        Ok(0.5 * norm_sq(&self.residual(x.data())))
    }

    /// `½‖Fx − y‖²` and its gradient `F*(Fx − y)`.
    pub fn misfit_and_grad(&self, x: &Volume) -> Result<(f64, Volume)> {
        self.check(x)?;
        let r = self.residual(x.data());
        let g = self.op.adjoint(&r);
        Ok((0.5 * norm_sq(&r), Volume::new(self.dims, self.spacing, g)?))
    }

    pub fn zeros(&self) -> Volume {
        Volume::zeros(self.dims).with_spacing(self.spacing)
    }

    /// `F*y`.
    pub fn adjoint_image(&self) -> Result<Volume> {
        Volume::new(self.dims, self.spacing, self.op.adjoint(self.y))
    }

    pub fn initial_guess(&self, mode: InitialGuess) -> Result<Volume> {
        match mode {
            InitialGuess::Zero => Ok(self.zeros()),
            InitialGuess::AdjointScaled => {
                let mut x = self.adjoint_image()?;
                let fx = self.op.apply(x.data());
                let den = norm_sq(&fx);
                let a = if den > 0.0 { dot(&fx, self.y) / den } else { 0.0 };
                x.data_mut().iter_mut().for_each(|v| *v *= a);
                Ok(x)
            }
        }
    }

    /// Largest eigenvalue of `F*F` by power iteration.
    pub fn lipschitz(&self, iters: usize, seed: u64) -> f64 {
        power_iteration_history(self.op, iters.max(1), seed).last().copied().unwrap_or(0.0)
    }

    /// Resolves configured step sizes. By default `s = t = 0.9 / L̂`, damped
    /// with the curvature `L_R` that `reg` reports near `x0`. Explicit steps in
    /// the config are used as given.
    pub fn step_sizes(&self, config: &SolveConfig, reg: &mut dyn Regularizer, x0: &Volume) -> Result<StepSizes> {
        let mut steps = self.undamped_steps(config)?;
        if config.data_step.is_none() && config.reg_step.is_none() {
            let l = 0.9 / steps.data;
            let lr = reg.curvature(x0)?;
            steps.damping = lr / l;
            log::debug!("step sizes: L = {l:.4e}, L_R = {lr:.4e}");
        }
        Ok(steps)
    }

    /// Configured step sizes without curvature damping.
    pub fn undamped_steps(&self, config: &SolveConfig) -> Result<StepSizes> {
        let data = match config.data_step {
            Some(s) => {
                let l = self.lipschitz(config.power_iters, config.seed);
                if s * l > 1.0 {
                    log::warn!("data step {s} exceeds 1/L = {}", 1.0 / l);
                }
                s
            }
            None => {
                let l = self.lipschitz(config.power_iters, config.seed);
                if !(l > 0.0) {
                    return Err(Error::Degenerate("operator norm estimate is zero".into()));
                }
                0.9 / l
            }
        };
        Ok(StepSizes::fixed(data, config.reg_step.unwrap_or(data)))
    }
}

/// `½‖Fx − y‖² + λ R(x)`.
pub fn objective(problem: &Problem, reg: &mut dyn Regularizer, x: &Volume, lambda: f64) -> Result<f64> {
    let m = problem.misfit(x)?;
    let v = if lambda == 0.0 { 0.0 } else { lambda * reg.value(x)? };
    let total = m + v;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("objective = {total}")));
    }
    Ok(total)
}

/// Result of a fixed-`λ` inner loop.
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub x: Volume,
    /// Objective after each iteration when monitoring was requested.
    pub objective: Vec<f64>,
}

/// `iters` incremental gradient iterations at fixed `λ`:
/// `z̃ = z − s F*(Fz − y)`, then `z ← z̃ − t λ ∇R(z̃)`, with `(s, t)` from
/// [`StepSizes::at`].
pub fn inner_loop(
    problem: &Problem,
    reg: &mut dyn Regularizer,
    x0: &Volume,
    lambda: f64,
    steps: StepSizes,
    iters: usize,
    monitor: bool,
) -> Result<InnerResult> {
    problem.check(x0)?;
    let mut z = x0.clone();
    let mut history = Vec::new();
    let (s, t) = steps.at(lambda);
    for j in 0..iters {
        let (_, g) = problem.misfit_and_grad(&z)?;
        for (zi, gi) in z.data_mut().iter_mut().zip(g.data()) {
            *zi -= s * gi;
        }
        if lambda != 0.0 {
            let (_, gr) = reg.value_and_grad(&z)?;
            let a = t * lambda;
            for (zi, gi) in z.data_mut().iter_mut().zip(gr.data()) {
                *zi -= a * gi;
            }
        }
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("inner iterate {} of {iters} at lambda {lambda}", j + 1)));
        }
        if monitor {
            history.push(objective(problem, reg, &z, lambda)?);
        }
    }
    Ok(InnerResult { x: z, objective: history })
}
