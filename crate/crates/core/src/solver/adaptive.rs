use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{inner_loop, Problem, Regularizer, SolveConfig, StepSizes};
use crate::error::{Error, Result};
use crate::volume::Volume;

/// A `λ` interval whose endpoint reconstructions straddle `C`:
/// `R(x_l) ≥ C ≥ R(x_u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bracket {
    pub l0: f64,
    pub u0: f64,
    pub r_l: f64,
    pub r_u: f64,
    /// Every probe as `(λ, R(x_λ))`, in probing order.
    pub curve: Vec<(f64, f64)>,
}

impl Bracket {
    pub fn is_valid(&self, c: f64) -> bool {
        self.l0 <= self.u0 && self.r_l >= c && c >= self.r_u
    }
}

/// Multiplicative bracket search from `config.lambda_start` over a black-box
/// map `λ ↦ R(x_λ)`. Expands upward while `R > C`, downward while `R < C`,
/// stopping at the first probe on the other side of `C`.
pub fn bracket_search_with(probe: &mut dyn FnMut(f64) -> Result<f64>, c: f64, config: &SolveConfig) -> Result<Bracket> {
    let f = config.expansion;
    let mut lambda = config.lambda_start;
    let mut r = probe(lambda)?;
    let mut curve = vec![(lambda, r)];
    let upward = r >= c;
    let mut last = (lambda, r);
    for _ in 0..config.max_expansions {
        lambda = if upward { lambda * f } else { lambda / f };
        r = probe(lambda)?;
        curve.push((lambda, r));
        let crossed = if upward { r <= c } else { r >= c };
        if crossed {
            let (l0, r_l, u0, r_u) = if upward { (last.0, last.1, lambda, r) } else { (lambda, r, last.0, last.1) };
            log::info!("bracket [{l0:.3e}, {u0:.3e}] with R = ({r_l:.4}, {r_u:.4}), C = {c:.4}");
            return Ok(Bracket { l0, u0, r_l, r_u, curve });
        }
        last = (lambda, r);
    }
    Err(Error::NoBracket { expansions: config.max_expansions, curve })
}

/// Bracket search where each probe runs `J/2` inner iterations from `x0`.
pub fn bracket_search(
    problem: &Problem,
    reg: &mut dyn Regularizer,
    x0: &Volume,
    c: f64,
    config: &SolveConfig,
    steps: StepSizes,
) -> Result<Bracket> {
    let iters = (config.inner_steps / 2).max(1);
    let mut probe = |lambda: f64| -> Result<f64> {
        let x = inner_loop(problem, reg, x0, lambda, steps, iters, false)?.x;
        let r = reg.value(&x)?;
        log::debug!("probe lambda {lambda:.3e}: R = {r:.4}");
        Ok(r)
    };
    bracket_search_with(&mut probe, c, config)
}

/// Checks a user-supplied `(l0, u0)` by running full inner loops from `x0`.
pub fn verify_bracket(
    problem: &Problem,
    reg: &mut dyn Regularizer,
    x0: &Volume,
    (l0, u0): (f64, f64),
    config: &SolveConfig,
    steps: StepSizes,
) -> Result<Bracket> {
    let mut r_at = |lambda| -> Result<f64> {
        let x = inner_loop(problem, reg, x0, lambda, steps, config.inner_steps, false)?.x;
        reg.value(&x)
    };
    let r_l = r_at(l0)?;
    let r_u = r_at(u0)?;
    Ok(Bracket { l0, u0, r_l, r_u, curve: vec![(l0, r_l), (u0, r_u)] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// `|R − C| ≤ ε1`.
    Consistent,
    /// `|u − l| ≤ ε2`.
    BracketWidth,
    MaxOuter,
    Continue,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Consistent => "consistent",
            StopReason::BracketWidth => "bracket-width",
            StopReason::MaxOuter => "max-outer",
            StopReason::Continue => "continue",
        })
    }
}

/// One outer iteration: `λ_i` and `(l_i, u_i)` as used, with the resulting
/// `R(x^{i+1})` and misfit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuterRecord {
    pub outer_iter: usize,
    pub lambda: f64,
    pub l: f64,
    pub u: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub misfit: f64,
    pub reason: StopReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructionTrace {
    pub records: Vec<OuterRecord>,
}

impl ReconstructionTrace {
    /// Brackets never grow: `[l_{i+1}, u_{i+1}] ⊆ [l_i, u_i]`.
    pub fn is_nested(&self) -> bool {
        self.records.windows(2).all(|w| w[1].l >= w[0].l && w[1].u <= w[0].u && w[1].l <= w[1].u)
    }
}

#[derive(Debug, Clone)]
pub struct AdaptiveResult {
    pub x: Volume,
    pub lambda: f64,
    pub trace: ReconstructionTrace,
}

/// One bracket update of the adaptive rule.
///
/// If `R < C` the weight is too large: `u ← λ`, `λ ← λ − β|u − l|`.
/// If `R > C` it is too small: `l ← λ`, `λ ← λ + β|u − l|`.
pub fn update_bracket(l: f64, u: f64, lambda: f64, r: f64, c: f64, beta: f64) -> (f64, f64, f64) {
    if r < c {
        let u = lambda;
        (l, u, lambda - beta * (u - l).abs())
    } else {
        let l = lambda;
        (l, u, lambda + beta * (u - l).abs())
    }
}

/// Upper bound on the number of outer iterations. Two more than the geometric
/// count: the first iteration starts at `λ_0 = l_0` and may leave the width
/// unchanged, and the width test runs on the bracket an iteration was started
/// with, one iteration after the update that shrank it.
pub fn outer_iteration_bound(width: f64, eps2: f64, beta: f64) -> usize {
    if width <= eps2 {
        return 1;
    }
    let q = beta.max(1.0 - beta);
    ((eps2 / width).ln() / q.ln()).ceil() as usize + 2
}

/// The adaptive outer loop over an arbitrary warm-started fixed-`λ` solver
/// `solve(x_start, λ) -> (x, R(x), misfit(x))`.
pub fn adaptive_loop(
    solve: &mut dyn FnMut(&Volume, f64) -> Result<(Volume, f64, f64)>,
    x0: &Volume,
    c: f64,
    bracket: &Bracket,
    config: &SolveConfig,
) -> Result<AdaptiveResult> {
    config.validate()?;
    if !bracket.is_valid(c) {
        return Err(Error::Precondition(format!(
            "bracket [{}, {}] has R = ({}, {}), which does not straddle C = {c}",
            bracket.l0, bracket.u0, bracket.r_l, bracket.r_u
        )));
    }
    let eps1 = config.eps1.unwrap_or(0.05 * c.abs());
    let eps2 = config.eps2.unwrap_or(1e-3 * (bracket.u0 - bracket.l0));
    let (mut l, mut u) = (bracket.l0, bracket.u0);
    let mut lambda = l;
    let mut x = x0.clone();
    let mut trace = ReconstructionTrace::default();
    for i in 0..config.outer_max.max(1) {
        let (xn, r, misfit) = solve(&x, lambda)?;
        x = xn;
        let reason = if (r - c).abs() <= eps1 {
            StopReason::Consistent
        } else if (u - l).abs() <= eps2 {
            StopReason::BracketWidth
        } else if i + 1 >= config.outer_max {
            StopReason::MaxOuter
        } else {
            StopReason::Continue
        };
        log::info!("outer {i}: lambda {lambda:.4e} in [{l:.4e}, {u:.4e}], R {r:.4}, misfit {misfit:.4e}, {reason}");
        trace.records.push(OuterRecord { outer_iter: i, lambda, l, u, r, misfit, reason });
        if reason != StopReason::Continue {
            break;
        }
        (l, u, lambda) = update_bracket(l, u, lambda, r, c, config.beta);
    }
    Ok(AdaptiveResult { x, lambda, trace })
}

/// Adaptive reconstruction with `J`-step inner loops warm-started from the
/// previous outer iterate.
pub fn reconstruct_adaptive(
    problem: &Problem,
    reg: &mut dyn Regularizer,
    x0: &Volume,
    c: f64,
    bracket: &Bracket,
    config: &SolveConfig,
    steps: StepSizes,
) -> Result<AdaptiveResult> {
    let mut solve = |start: &Volume, lambda: f64| -> Result<(Volume, f64, f64)> {
        let x = inner_loop(problem, reg, start, lambda, steps, config.inner_steps, false)?.x;
        let r = reg.value(&x)?;
        let m = problem.misfit(&x)?;
        Ok((x, r, m))
    };
    adaptive_loop(&mut solve, x0, c, bracket, config)
}

/// Trace as CSV with header `outer_iter,lambda,l,u,R,misfit,reason`.
pub fn write_trace_csv(trace: &ReconstructionTrace, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rec in &trace.records {
        w.serialize(rec).map_err(|e| Error::Format { path: Path::new("<trace>").to_path_buf(), msg: e.to_string() })?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))
}
