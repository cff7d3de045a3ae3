use super::Tensor;

/// Per-channel affine map `y = exp(log_scale) * x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub log_scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ActNorm {
    pub fn identity(channels: usize) -> Self {
        Self { log_scale: vec![0.0; channels], bias: vec![0.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, f64) {
        let mut y = x.clone();
        for c in 0..x.channels {
            let s = self.log_scale[c].exp();
            let b = self.bias[c];
            y.channel_mut(c).iter_mut().for_each(|v| *v = s * *v + b);
        }
        (y, self.logdet(x.voxels()))
    }

    pub fn logdet(&self, voxels: usize) -> f64 {
        voxels as f64 * self.log_scale.iter().sum::<f64>()
    }

    pub fn inverse(&self, y: &Tensor) -> Tensor {
        let mut x = y.clone();
        for c in 0..y.channels {
            let inv = (-self.log_scale[c]).exp();
            let b = self.bias[c];
            x.channel_mut(c).iter_mut().for_each(|v| *v = (*v - b) * inv);
        }
        x
    }

    /// Pulls `gy` back through the layer for a loss `f(y) + coef * logdet`.
    pub fn backward(&self, x: &Tensor, gy: &Tensor, coef: f64, grads: Option<&mut ActNorm>) -> Tensor {
        let mut gx = gy.clone();
        let mut grads = grads;
        for c in 0..x.channels {
            let s = self.log_scale[c].exp();
            if let Some(g) = grads.as_deref_mut() {
                let xc = x.channel(c);
                let gc = gy.channel(c);
                let mut gs = 0.0;
                let mut gb = 0.0;
                for (xv, gv) in xc.iter().zip(gc) {
                    gs += gv * xv;
                    gb += gv;
                }
                g.log_scale[c] += gs * s + coef * x.voxels() as f64;
                g.bias[c] += gb;
            }
            gx.channel_mut(c).iter_mut().for_each(|v| *v *= s);
        }
        gx
    }
}
