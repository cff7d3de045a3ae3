//! Glow-style normalizing flow on volumes.
//!
//! The flow maps a volume `x` to a latent state through `K` levels. Each level
//! squeezes space into channels, applies `steps_per_level` steps of flow, and
//! (except the last) splits off half of its channels as a finished latent
//! block. The regularizer is `R(x) = ½‖N(x)‖² − log|det J_N(x)|`; the Gaussian
//! normalizing constant is left out.

mod actnorm;
mod conv;
mod coupling;
mod invconv;
mod step;
mod tensor;

pub use actnorm::ActNorm;
pub use conv::Conv3d;
pub use coupling::{AffineCoupling, ALPHA};
pub use invconv::InvConv1x1;
pub use step::{FlowStep, StepCache, SubLayer};
pub use tensor::{squeeze, unsqueeze, Tensor};

use crate::error::{Error, Result};
use crate::volume::Volume;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Shape of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowArch {
    pub levels: usize,
    pub steps_per_level: usize,
    pub hidden_channels: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub dims: [usize; 3],
}

fn one() -> usize {
    1
}

impl Default for FlowArch {
    fn default() -> Self {
        Self { levels: 2, steps_per_level: 4, hidden_channels: 16, channels: 1, dims: [16, 16, 16] }
    }
}

impl FlowArch {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.steps_per_level == 0 || self.hidden_channels == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "flow arch needs positive levels, steps, hidden and input channels: {self:?}"
            )));
        }
        let m = 1usize << self.levels;
        if self.dims.iter().any(|&n| n == 0 || n % m != 0) {
            return Err(Error::Config(format!(
                "flow dims {:?} must be divisible by 2^{} = {m}",
                self.dims, self.levels
            )));
        }
        Ok(())
    }

    /// Number of scalar inputs `D`.
    pub fn input_len(&self) -> usize {
        self.channels * self.dims.iter().product::<usize>()
    }

    /// `(channels, dims)` seen by the steps of each level.
    pub fn level_shapes(&self) -> Vec<(usize, [usize; 3])> {
        let mut c = self.channels;
        let mut d = self.dims;
        let mut out = Vec::with_capacity(self.levels);
        for k in 0..self.levels {
            c *= 8;
            d = d.map(|n| n / 2);
            out.push((c, d));
            if k + 1 < self.levels {
                c /= 2;
            }
        }
        out
    }

    /// Shapes of the split-off blocks followed by the final latent.
    pub fn latent_shapes(&self) -> (Vec<(usize, [usize; 3])>, (usize, [usize; 3])) {
        let shapes = self.level_shapes();
        let splits = shapes[..shapes.len() - 1].iter().map(|&(c, d)| (c - c / 2, d)).collect();
        (splits, shapes[shapes.len() - 1])
    }
}

/// Output of the normalizing direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub latent: Tensor,
    /// Blocks split off after each level but the last, in level order.
    pub splits: Vec<Tensor>,
}

impl LatentState {
    pub fn len(&self) -> usize {
        self.latent.len() + self.splits.iter().map(Tensor::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm_sq(&self) -> f64 {
        self.latent.norm_sq() + self.splits.iter().map(Tensor::norm_sq).sum::<f64>()
    }

    /// Standard normal draw with the given shapes, scaled by `temperature`.
    pub fn sample(arch: &FlowArch, temperature: f64, rng: &mut impl Rng) -> Self {
        let (splits, last) = arch.latent_shapes();
        let mut draw = |(c, d): (usize, [usize; 3])| {
            let mut t = Tensor::zeros(c, d);
            for v in t.data.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v = temperature * n;
            }
            t
        };
        let splits = splits.into_iter().map(&mut draw).collect();
        let latent = draw(last);
        Self { latent, splits }
    }
}

/// Forward activations kept for reverse mode.
struct Trace {
    caches: Vec<Vec<StepCache>>,
    state: LatentState,
    logdet: f64,
}

/// Where the first non-finite value appeared during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonFiniteSite {
    pub level: usize,
    pub step: usize,
    pub layer: SubLayer,
}

impl std::fmt::Display for NonFiniteSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "level {} step {} {}", self.level, self.step, self.layer)
    }
}

/// A Glow-style flow with parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub arch: FlowArch,
    /// `levels[k][s]` is step `s` of level `k`.
    pub levels: Vec<Vec<FlowStep>>,
}

impl Flow {
    /// Every layer is the identity, so the flow is a pure permutation.
    pub fn identity(arch: FlowArch) -> Result<Self> {
        arch.validate()?;
        let levels = arch
            .level_shapes()
            .iter()
            .map(|&(c, _)| (0..arch.steps_per_level).map(|_| FlowStep::identity(c, arch.hidden_channels)).collect())
            .collect();
        Ok(Self { arch, levels })
    }

    /// Training initialization: random orthogonal mixing, small random hidden
    /// convolutions, zero output convolution (each step starts as identity up
    /// to the mixing).
    pub fn init(arch: FlowArch, seed: u64) -> Result<Self> {
        let mut flow = Self::identity(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for step in flow.levels.iter_mut().flatten() {
            let c = step.invconv.channels();
            step.invconv = InvConv1x1::from_matrix(c, &random_orthogonal(c, &mut rng));
            for conv in [&mut step.coupling.conv1, &mut step.coupling.conv2] {
                conv.weight.iter_mut().for_each(|w| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *w = 0.05 * n;
                });
            }
        }
        Ok(flow)
    }

    /// Every trainable parameter perturbed by `U(-scale, scale)`, with random
    /// orthogonal mixing. Used to probe the flow away from its initialization.
    pub fn random(arch: FlowArch, seed: u64, scale: f64) -> Result<Self> {
        let mut flow = Self::init(arch, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for step in flow.levels.iter_mut().flatten() {
            let c = step.invconv.channels();
            for i in 0..c {
                for j in 0..c {
                    if j < i {
                        step.invconv.lower[i * c + j] += rng.random_range(-scale..scale);
                    } else if j > i {
                        step.invconv.upper[i * c + j] += rng.random_range(-scale..scale);
                    }
                }
            }
            let others: [&mut Vec<f64>; 9] = [
                &mut step.actnorm.log_scale,
                &mut step.actnorm.bias,
                &mut step.invconv.log_diag,
                &mut step.coupling.conv1.weight,
                &mut step.coupling.conv1.bias,
                &mut step.coupling.conv2.weight,
                &mut step.coupling.conv2.bias,
                &mut step.coupling.conv3.weight,
                &mut step.coupling.conv3.bias,
            ];
            for p in others {
                p.iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
            }
        }
        Ok(flow)
    }

    /// Trainable parameter vectors in checkpoint order: for every level and
    /// step, actnorm log-scale and bias, mixing strict-lower and strict-upper
    /// (dense `C×C`), log-diagonal, then weight and bias of the three coupling
    /// convolutions.
    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for s in self.levels.iter().flatten() {
            out.extend([
                &s.actnorm.log_scale,
                &s.actnorm.bias,
                &s.invconv.lower,
                &s.invconv.upper,
                &s.invconv.log_diag,
                &s.coupling.conv1.weight,
                &s.coupling.conv1.bias,
                &s.coupling.conv2.weight,
                &s.coupling.conv2.bias,
                &s.coupling.conv3.weight,
                &s.coupling.conv3.bias,
            ]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for s in self.levels.iter_mut().flatten() {
            out.extend([
                &mut s.actnorm.log_scale,
                &mut s.actnorm.bias,
                &mut s.invconv.lower,
                &mut s.invconv.upper,
                &mut s.invconv.log_diag,
                &mut s.coupling.conv1.weight,
                &mut s.coupling.conv1.bias,
                &mut s.coupling.conv2.weight,
                &mut s.coupling.conv2.bias,
                &mut s.coupling.conv3.weight,
                &mut s.coupling.conv3.bias,
            ]);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.params().into_iter().flatten().copied().collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.num_params(), flat.len())));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Same structure with every trainable parameter zero; used as a gradient
    /// accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for p in g.params_mut() {
            p.fill(0.0);
        }
        g
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &Volume) -> Result<Tensor> {
        if x.dims() != self.arch.dims || self.arch.channels != 1 {
            return Err(Error::Shape(format!(
                "volume dims {:?} do not match flow dims {:?}",
                x.dims(),
                self.arch.dims
            )));
        }
        Tensor::new(1, x.dims(), x.data().to_vec())
    }

    fn trace(&self, x: Tensor) -> std::result::Result<Trace, NonFiniteSite> {
        let last = self.levels.len() - 1;
        let mut h = x;
        let mut logdet = 0.0;
        let mut splits = Vec::with_capacity(last);
        let mut caches = Vec::with_capacity(self.levels.len());
        for (k, steps) in self.levels.iter().enumerate() {
            h = squeeze(&h).expect("arch validated");
            let mut level_caches = Vec::with_capacity(steps.len());
            for (s, step) in steps.iter().enumerate() {
                let (y, ld, cache) =
                    step.forward_cached(&h).map_err(|layer| NonFiniteSite { level: k, step: s, layer })?;
                logdet += ld;
                level_caches.push(cache);
                h = y;
            }
            caches.push(level_caches);
            if k < last {
                let (keep, z) = h.split_half();
                splits.push(z);
                h = keep;
            }
        }
        Ok(Trace { caches, state: LatentState { latent: h, splits }, logdet })
    }

    fn trace_volume(&self, x: &Volume) -> Result<Trace> {
        let t = self.check_input(x)?;
        self.trace(t).map_err(|site| Error::NonFinite(format!("flow forward pass at {site}")))
    }

    /// `N(x)` and the total log-determinant of its Jacobian.
    pub fn normalize(&self, x: &Volume) -> Result<(LatentState, f64)> {
        let last = self.levels.len() - 1;
        let mut h = self.check_input(x)?;
        let mut logdet = 0.0;
        let mut splits = Vec::with_capacity(last);
        for (k, steps) in self.levels.iter().enumerate() {
            h = squeeze(&h)?;
            for step in steps {
                let (y, ld) = step.forward(&h);
                logdet += ld;
                h = y;
            }
            if k < last {
                let (keep, z) = h.split_half();
                splits.push(z);
                h = keep;
            }
        }
        Ok((LatentState { latent: h, splits }, logdet))
    }

    /// `G(z) = N^{-1}(z)`.
    pub fn generate(&self, z: &LatentState) -> Result<Volume> {
        let (split_shapes, last_shape) = self.arch.latent_shapes();
        let shape_of = |t: &Tensor| (t.channels, t.dims);
        if shape_of(&z.latent) != last_shape
            || z.splits.len() != split_shapes.len()
            || z.splits.iter().zip(&split_shapes).any(|(t, s)| shape_of(t) != *s)
        {
            return Err(Error::Shape("latent shapes do not match the flow".into()));
        }
        let mut h = z.latent.clone();
        for (k, steps) in self.levels.iter().enumerate().rev() {
            if k < z.splits.len() {
                h = Tensor::concat(&h, &z.splits[k]);
            }
            for step in steps.iter().rev() {
                h = step.inverse(&h);
            }
            h = unsqueeze(&h)?;
        }
        Volume::new(self.arch.dims, 1.0, h.data)
    }

    /// `R(x) = ½‖N(x)‖² − log|det J|`.
    pub fn neg_log_density(&self, x: &Volume) -> Result<f64> {
        let (z, logdet) = self.normalize(x)?;
        let r = 0.5 * z.norm_sq() - logdet;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("R(x) = {r}")));
        }
        Ok(r)
    }

    /// Reverse pass of `R` from a trace. Returns the input gradient and adds
    /// `weight * dR/dθ` into `grads` when given.
    fn backward(&self, trace: &Trace, weight: f64, mut grads: Option<&mut Flow>) -> Tensor {
        let st = &trace.state;
        let scale = |t: &Tensor| {
            let mut t = t.clone();
            t.data.iter_mut().for_each(|v| *v *= weight);
            t
        };
        let mut g = scale(&st.latent);
        for (k, steps) in self.levels.iter().enumerate().rev() {
            if k < st.splits.len() {
                g = Tensor::concat(&g, &scale(&st.splits[k]));
            }
            for (s, step) in steps.iter().enumerate().rev() {
                let gstep = grads.as_deref_mut().map(|gr| &mut gr.levels[k][s]);
                g = step.backward(&trace.caches[k][s], &g, -weight, gstep);
            }
            g = unsqueeze(&g).expect("arch validated");
        }
        g
    }

    /// `R(x)` and `∇_x R(x)`.
    pub fn value_and_grad_input(&self, x: &Volume) -> Result<(f64, Volume)> {
        let trace = self.trace_volume(x)?;
        let r = 0.5 * trace.state.norm_sq() - trace.logdet;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("R(x) = {r}")));
        }
        let g = self.backward(&trace, 1.0, None);
        Ok((r, Volume::new(x.dims(), x.spacing(), g.data)?))
    }

    pub fn grad_input(&self, x: &Volume) -> Result<Volume> {
        Ok(self.value_and_grad_input(x)?.1)
    }

    /// Adds `weight * ∇_θ R(x)` into `grads` and returns `R(x)`.
    pub fn accumulate_param_grad(&self, x: &Volume, weight: f64, grads: &mut Flow) -> Result<f64> {
        let trace = self.trace_volume(x)?;
        let r = 0.5 * trace.state.norm_sq() - trace.logdet;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("R(x) = {r}")));
        }
        self.backward(&trace, weight, Some(grads));
        Ok(r)
    }

    /// Mean `R` over the batch and its gradient with respect to every parameter.
    pub fn grad_params(&self, batch: &[Volume]) -> Result<(f64, Flow)> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let w = 1.0 / batch.len() as f64;
        let mut grads = self.zeros_like();
        let mut total = 0.0;
        for x in batch {
            total += self.accumulate_param_grad(x, w, &mut grads)?;
        }
        Ok((total * w, grads))
    }

    /// Data-dependent actnorm initialization: walking through the network in
    /// order, each actnorm is set so that its output over the batch has zero
    /// mean and unit standard deviation per channel (std floored at 1e-6).
    pub fn init_actnorm(&mut self, batch: &[Volume]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Precondition("actnorm initialization needs a nonempty batch".into()));
        }
        let mut hs = batch.iter().map(|x| self.check_input(x)).collect::<Result<Vec<_>>>()?;
        let last = self.levels.len() - 1;
        for (k, steps) in self.levels.iter_mut().enumerate() {
            for h in hs.iter_mut() {
                *h = squeeze(h)?;
            }
            for step in steps.iter_mut() {
                let c = step.actnorm.channels();
                for ch in 0..c {
                    let n = (hs.len() * hs[0].voxels()) as f64;
                    let mean = hs.iter().map(|h| h.channel(ch).iter().sum::<f64>()).sum::<f64>() / n;
                    let var =
                        hs.iter().map(|h| h.channel(ch).iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sum::<f64>()
                            / n;
                    let std = var.sqrt().max(1e-6);
                    step.actnorm.log_scale[ch] = -std.ln();
                    step.actnorm.bias[ch] = -mean / std;
                }
                for h in hs.iter_mut() {
                    *h = step.forward(h).0;
                }
            }
            if k < last {
                for h in hs.iter_mut() {
                    *h = h.split_half().0;
                }
            }
        }
        Ok(())
    }
}

/// Row-major orthogonal `c×c` matrix from the QR factorization of a Gaussian draw.
fn random_orthogonal(c: usize, rng: &mut impl Rng) -> Vec<f64> {
    let m = DMatrix::from_fn(c, c, |_, _| {
        let n: f64 = StandardNormal.sample(rng);
        n
    });
    let q = m.qr().q();
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            out[i * c + j] = q[(i, j)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> FlowArch {
        FlowArch { levels: 2, steps_per_level: 2, hidden_channels: 4, channels: 1, dims: [4, 4, 4] }
    }

    fn input(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Volume::new(dims, 1.0, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn arch_validation() {
        assert!(FlowArch::default().validate().is_ok());
        let mut a = small_arch();
        a.dims = [4, 4, 6];
        assert!(a.validate().is_err());
        a.dims = [4, 4, 4];
        a.steps_per_level = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn latent_elements_conserved() {
        let arch = FlowArch::default();
        let (splits, last) = arch.latent_shapes();
        let n: usize = splits.iter().chain([&last]).map(|(c, d)| c * d.iter().product::<usize>()).sum();
        assert_eq!(n, arch.input_len());
    }

    #[test]
    fn identity_flow_value_and_gradient() {
        let flow = Flow::identity(small_arch()).unwrap();
        let mut x = Volume::zeros([4, 4, 4]);
        x.set(1, 2, 3, 1.0);
        x.set(0, 0, 0, -1.0);
        assert_eq!(flow.neg_log_density(&x).unwrap(), 1.0);
        let x = input([4, 4, 4], 1);
        let g = flow.grad_input(&x).unwrap();
        assert_eq!(g.data(), x.data());
    }

    #[test]
    fn round_trip_random_flow() {
        let flow = Flow::random(small_arch(), 3, 0.3).unwrap();
        let x = input([4, 4, 4], 4);
        let (z, _) = flow.normalize(&x).unwrap();
        let back = flow.generate(&z).unwrap();
        let err = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn flat_parameters_round_trip() {
        let flow = Flow::random(small_arch(), 5, 0.1).unwrap();
        let mut other = Flow::identity(small_arch()).unwrap();
        other.levels.iter_mut().flatten().zip(flow.levels.iter().flatten()).for_each(|(o, f)| {
            o.invconv.perm = f.invconv.perm.clone();
            o.invconv.sign = f.invconv.sign.clone();
        });
        other.set_params_flat(&flow.params_flat()).unwrap();
        assert_eq!(other, flow);
        assert!(other.set_params_flat(&[0.0]).is_err());
    }

    #[test]
    fn actnorm_init_standardizes() {
        let batch: Vec<_> = (0..3).map(|s| input([4, 4, 4], 10 + s)).collect();
        let mut flow = Flow::init(small_arch(), 2).unwrap();
        flow.init_actnorm(&batch).unwrap();
        let an = &flow.levels[0][0].actnorm;
        let hs: Vec<_> = batch
            .iter()
            .map(|x| an.forward(&squeeze(&Tensor::new(1, [4, 4, 4], x.data().to_vec()).unwrap()).unwrap()).0)
            .collect();
        for c in 0..8 {
            let vals: Vec<f64> = hs.iter().flat_map(|h| h.channel(c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn actnorm_init_constant_input_hits_floor() {
        let batch = vec![Volume::zeros([4, 4, 4])];
        let mut flow = Flow::init(small_arch(), 2).unwrap();
        flow.init_actnorm(&batch).unwrap();
        assert!((flow.levels[0][0].actnorm.log_scale[0] - 1e6f64.ln()).abs() < 1e-9);
        assert!(flow.is_finite());
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let flow = Flow::random(small_arch(), 7, 0.2).unwrap();
        let x = input([4, 4, 4], 8);
        let (r1, g1) = flow.grad_params(std::slice::from_ref(&x)).unwrap();
        let (r2, g2) = flow.grad_params(&[x.clone(), x]).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
        for (a, b) in g1.params_flat().iter().zip(g2.params_flat()) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }
}
