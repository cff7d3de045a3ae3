use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::volume::Volume;

/// A differentiable regularizer `R` evaluated on whole volumes.
///
/// Methods take `&mut self` so stochastic regularizers can advance their
/// random state between calls.
pub trait Regularizer {
    /// Value used for decisions (bracketing, stopping).
    fn value(&mut self, x: &Volume) -> Result<f64>;
    fn value_and_grad(&mut self, x: &Volume) -> Result<(f64, Volume)>;
    /// Estimate of the Lipschitz constant of `∇R` near `x`, or 0 if unknown.
    fn curvature(&mut self, _x: &Volume) -> Result<f64> {
        Ok(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Patches drawn per gradient evaluation.
    pub patches: usize,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { patches: 8, seed: 0 }
    }
}

/// Flow prior `R(x) = -log π(x)`. On volumes larger than the flow's input it
/// becomes the patch average over `M` uniformly drawn sub-volume offsets.
///
/// Gradient evaluations draw fresh offsets each call. [`Regularizer::value`]
/// uses the deterministic tiling of [`tiling_offsets`], so decisions based on
/// the value do not depend on the random stream.
#[derive(Debug, Clone)]
pub struct FlowPrior<'a> {
    flow: &'a Flow,
    config: PatchConfig,
    rng: ChaCha8Rng,
}

impl<'a> FlowPrior<'a> {
    pub fn new(flow: &'a Flow, config: PatchConfig) -> Result<Self> {
        if config.patches == 0 {
            return Err(Error::Config("patch prior needs at least one patch".into()));
        }
        Ok(Self { flow, config, rng: ChaCha8Rng::seed_from_u64(config.seed) })
    }

    pub fn flow(&self) -> &Flow {
        self.flow
    }

    fn is_full(&self, x: &Volume) -> bool {
        x.dims() == self.flow.arch.dims
    }
}

impl Regularizer for FlowPrior<'_> {
    fn value(&mut self, x: &Volume) -> Result<f64> {
        if self.is_full(x) {
            return self.flow.neg_log_density(x);
        }
        let offsets = tiling_offsets(x.dims(), self.flow.arch.dims)?;
        patch_value(self.flow, x, &offsets)
    }

    fn value_and_grad(&mut self, x: &Volume) -> Result<(f64, Volume)> {
        if self.is_full(x) {
            return self.flow.value_and_grad_input(x);
        }
        let offsets = random_offsets(x.dims(), self.flow.arch.dims, self.config.patches, &mut self.rng)?;
        patch_value_and_grad(self.flow, x, &offsets)
    }

    /// Largest Hessian magnitude of the flow `R` at a zero patch and at the
    /// central patch of `x`.
    fn curvature(&mut self, x: &Volume) -> Result<f64> {
        let pd = self.flow.arch.dims;
        let dims = x.dims();
        if (0..3).any(|a| pd[a] > dims[a]) {
            return Err(Error::Shape(format!("image {dims:?} is smaller than patch {pd:?}")));
        }
        let centre: [usize; 3] = std::array::from_fn(|a| (dims[a] - pd[a]) / 2);
        let at_x = hessian_norm(self.flow, &x.extract(centre, pd)?, CURVATURE_ITERS, self.config.seed)?;
        let at_zero = hessian_norm(self.flow, &Volume::zeros(pd), CURVATURE_ITERS, self.config.seed)?;
        Ok(at_x.max(at_zero))
    }
}

const CURVATURE_ITERS: usize = 20;

/// Power iteration on central-difference Hessian-vector products of the flow
/// `R` at `x`; returns the magnitude of the dominant eigenvalue.
pub fn hessian_norm(flow: &Flow, x: &Volume, iters: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = 1e-4;
    let mut est = 0.0;
    for _ in 0..iters {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|a| *a /= n);
        let shifted = |sign: f64| {
            let mut y = x.clone();
            y.data_mut().iter_mut().zip(&v).for_each(|(a, b)| *a += sign * h * b);
            flow.grad_input(&y)
        };
        let (gp, gm) = (shifted(1.0)?, shifted(-1.0)?);
        let hv: Vec<f64> = gp.data().iter().zip(gm.data()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        est = hv.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = hv;
    }
    if !est.is_finite() {
        return Err(Error::NonFinite(format!("Hessian estimate = {est}")));
    }
    Ok(est)
}

fn valid_starts(image: [usize; 3], patch: [usize; 3]) -> Result<[usize; 3]> {
    if (0..3).any(|a| patch[a] > image[a]) {
        return Err(Error::Shape(format!("image {image:?} is smaller than patch {patch:?}")));
    }
    Ok(std::array::from_fn(|a| image[a] - patch[a] + 1))
}

/// `m` offsets drawn uniformly over all valid integer starts.
pub fn random_offsets(image: [usize; 3], patch: [usize; 3], m: usize, rng: &mut impl Rng) -> Result<Vec<[usize; 3]>> {
    let n = valid_starts(image, patch)?;
    Ok((0..m).map(|_| std::array::from_fn(|a| rng.random_range(0..n[a]))).collect())
}

/// Every valid offset, x fastest.
pub fn all_offsets(image: [usize; 3], patch: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    let n = valid_starts(image, patch)?;
    let mut out = Vec::with_capacity(n.iter().product());
    for z in 0..n[2] {
        for y in 0..n[1] {
            for x in 0..n[0] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Offsets of patches covering the image with stride equal to the patch size;
/// the last patch on each axis is aligned to the far edge.
pub fn tiling_offsets(image: [usize; 3], patch: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    valid_starts(image, patch)?;
    let axis = |a: usize| {
        let mut s: Vec<usize> = (0..image[a]).step_by(patch[a]).map(|o| o.min(image[a] - patch[a])).collect();
        s.dedup();
        s
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let mut out = Vec::new();
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Mean `R` over the patches at `offsets`.
pub fn patch_value(flow: &Flow, x: &Volume, offsets: &[[usize; 3]]) -> Result<f64> {
    if offsets.is_empty() {
        return Err(Error::Precondition("no patch offsets".into()));
    }
    let mut sum = 0.0;
    for &o in offsets {
        sum += flow.neg_log_density(&x.extract(o, flow.arch.dims)?)?;
    }
    Ok(sum / offsets.len() as f64)
}

/// Mean `R` over the patches and its gradient: each patch gradient is added
/// at its location with weight `1/M`.
pub fn patch_value_and_grad(flow: &Flow, x: &Volume, offsets: &[[usize; 3]]) -> Result<(f64, Volume)> {
    if offsets.is_empty() {
        return Err(Error::Precondition("no patch offsets".into()));
    }
    let w = 1.0 / offsets.len() as f64;
    let mut grad = Volume::zeros(x.dims()).with_spacing(x.spacing());
    let mut sum = 0.0;
    for &o in offsets {
        let (r, g) = flow.value_and_grad_input(&x.extract(o, flow.arch.dims)?)?;
        sum += r;
        grad.add_patch(o, &g, w);
    }
    Ok((sum * w, grad))
}
