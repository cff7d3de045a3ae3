use super::{ActNorm, AffineCoupling, InvConv1x1, Tensor};

/// One step of flow: actnorm, invertible 1x1 mixing, affine coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub invconv: InvConv1x1,
    pub coupling: AffineCoupling,
}

/// Inputs of the three sub-layers, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x_actnorm: Tensor,
    pub x_invconv: Tensor,
    pub x_coupling: Tensor,
}

/// Which sub-layer of a step produced a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubLayer {
    ActNorm,
    InvConv,
    Coupling,
}

impl std::fmt::Display for SubLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SubLayer::ActNorm => "actnorm",
            SubLayer::InvConv => "invconv",
            SubLayer::Coupling => "coupling",
        })
    }
}

impl FlowStep {
    pub fn identity(channels: usize, hidden: usize) -> Self {
        Self {
            actnorm: ActNorm::identity(channels),
            invconv: InvConv1x1::identity(channels),
            coupling: AffineCoupling::zeros(channels, hidden),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, f64) {
        let (h, l1) = self.actnorm.forward(x);
        let (h, l2) = self.invconv.forward(&h);
        let (y, l3) = self.coupling.forward(&h);
        (y, l1 + l2 + l3)
    }

    /// Forward pass that keeps sub-layer inputs. Stops at the first sub-layer
    /// whose output is not finite and reports it.
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, f64, StepCache), SubLayer> {
        let (h1, l1) = self.actnorm.forward(x);
        if !h1.is_finite() || !l1.is_finite() {
            return Err(SubLayer::ActNorm);
        }
        let (h2, l2) = self.invconv.forward(&h1);
        if !h2.is_finite() || !l2.is_finite() {
            return Err(SubLayer::InvConv);
        }
        let (y, l3) = self.coupling.forward(&h2);
        if !y.is_finite() || !l3.is_finite() {
            return Err(SubLayer::Coupling);
        }
        let cache = StepCache { x_actnorm: x.clone(), x_invconv: h1, x_coupling: h2 };
        Ok((y, l1 + l2 + l3, cache))
    }

    pub fn inverse(&self, y: &Tensor) -> Tensor {
        let h = self.coupling.inverse(y);
        let h = self.invconv.inverse(&h);
        self.actnorm.inverse(&h)
    }

    /// Pulls `gy` back for a loss `f(y) + coef * logdet`, accumulating parameter
    /// gradients into `grads` when given.
    pub fn backward(&self, cache: &StepCache, gy: &Tensor, coef: f64, grads: Option<&mut FlowStep>) -> Tensor {
        let (ga, gi, gc) = match grads {
            Some(g) => (Some(&mut g.actnorm), Some(&mut g.invconv), Some(&mut g.coupling)),
            None => (None, None, None),
        };
        let g = self.coupling.backward(&cache.x_coupling, gy, coef, gc);
        let g = self.invconv.backward(&cache.x_invconv, &g, coef, gi);
        self.actnorm.backward(&cache.x_actnorm, &g, coef, ga)
    }
}
