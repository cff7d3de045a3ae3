//! Maximum-likelihood training of the flow prior and the reference constant `C`.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::flow::{Flow, FlowArch};
use crate::volume::{augment, generate_phantom, AugmentConfig, PhantomConfig, Volume};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub dataset_size: usize,
    /// When set, phantoms are generated at these dims and each sample is a
    /// random sub-volume of the flow's size, matching how the prior is applied
    /// to patches of larger images.
    pub source_dims: Option<[usize; 3]>,
    pub phantom: PhantomConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 50.0,
            dataset_size: 200,
            source_dims: None,
            phantom: PhantomConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.clip_norm > 0.0;
        if !rates_ok || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "training needs positive rates, decays in [0, 1) and batch_size >= 1: {self:?}"
            )));
        }
        self.phantom.validate()?;
        self.augment.validate()
    }
}

/// Per-epoch mean negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub nats: f64,
    pub nats_per_dim: f64,
}

/// Mean `R` over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub c: f64,
    pub nats_per_dim: f64,
}

/// Training set: phantom `i` uses seed `seed + i`, then (with `source_dims`)
/// a uniformly placed crop and a random augmentation (including jitter), both
/// seeded the same way.
pub fn build_dataset(dims: [usize; 3], config: &TrainConfig) -> Result<Vec<Volume>> {
    config.validate()?;
    if let Some(src) = config.source_dims {
        if (0..3).any(|a| src[a] < dims[a]) {
            return Err(Error::Config(format!("source dims {src:?} are smaller than sample dims {dims:?}")));
        }
    }
    (0..config.dataset_size)
        .map(|i| {
            let seed = config.seed.wrapping_add(i as u64);
            let v = match config.source_dims {
                None => generate_phantom(dims, &config.phantom.with_seed(seed))?,
                Some(src) => {
                    let big = generate_phantom(src, &config.phantom.with_seed(seed))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let start = std::array::from_fn(|a| rng.random_range(0..=src[a] - dims[a]));
                    big.extract(start, dims)?
                }
            };
            let mut aug = config.augment;
            aug.seed = seed;
            augment(&v, &aug)
        })
        .collect()
}

/// `C = mean R(x)` over the dataset, also reported per dimension.
pub fn compute_reference(dataset: &[Volume], flow: &Flow) -> Result<Reference> {
    if dataset.is_empty() {
        return Err(Error::Precondition("reference constant needs a nonempty dataset".into()));
    }
    let mut sum = 0.0;
    for x in dataset {
        sum += flow.neg_log_density(x)?;
    }
    let c = sum / dataset.len() as f64;
    Ok(Reference { c, nats_per_dim: c / flow.arch.input_len() as f64 })
}

/// Adaptive-moment optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            lr: config.learning_rate,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Rescales `g` in place to norm at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// Fits a fresh flow to the dataset by minibatch maximum likelihood.
///
/// Actnorm layers are initialized from the first `batch_size` samples, then each
/// epoch visits the data in a seeded random order. `C` is computed with the
/// final parameters on the whole dataset.
pub fn train(dataset: &[Volume], arch: FlowArch, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    arch.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("training needs a nonempty dataset".into()));
    }
    if let Some(x) = dataset.iter().find(|x| x.dims() != arch.dims) {
        return Err(Error::Shape(format!("dataset volume dims {:?} do not match flow dims {:?}", x.dims(), arch.dims)));
    }
    let mut flow = Flow::init(arch, config.seed)?;
    let init_n = config.batch_size.min(dataset.len());
    flow.init_actnorm(&dataset[..init_n])?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(flow.num_params(), config);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let dim = arch.input_len() as f64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let w = 1.0 / idx.len() as f64;
            let mut grads = flow.zeros_like();
            for &i in idx {
                let r = flow.accumulate_param_grad(&dataset[i], w, &mut grads).map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, step {step}: {msg}")),
                    other => other,
                })?;
                epoch_sum += r;
            }
            let mut g = grads.params_flat();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("epoch {epoch}, step {step}: parameter gradient")));
            }
            clip_grad_norm(&mut g, config.clip_norm);
            let mut p = flow.params_flat();
            adam.step(&mut p, &g);
            flow.set_params_flat(&p)?;
        }
        let nats = epoch_sum / dataset.len() as f64;
        log::info!("epoch {:>3}: mean NLL {nats:.4} nats ({:.6} nats/dim)", epoch + 1, nats / dim);
        curve.push(EpochStats { nats, nats_per_dim: nats / dim });
    }
    let reference = compute_reference(dataset, &flow)?;
    Ok(Checkpoint { flow, curve, c: reference.c, seed: config.seed, dataset_size: dataset.len() })
}
