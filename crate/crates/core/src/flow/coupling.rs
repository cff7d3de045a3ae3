use super::conv::Conv3d;
use super::Tensor;

/// Bound on the coupling log-scale: `log g1 = ALPHA * tanh(raw / ALPHA)`.
pub const ALPHA: f64 = 2.0;

/// Affine coupling. The second channel half conditions a small network whose
/// output scales and shifts the first half.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCoupling {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
    pub conv3: Conv3d,
}

struct NetCache {
    a1: Tensor,
    a2: Tensor,
    raw: Tensor,
}

impl AffineCoupling {
    /// All-zero network; the layer is the identity.
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        let half = channels / 2;
        Self {
            conv1: Conv3d::zeros(channels - half, hidden, 3),
            conv2: Conv3d::zeros(hidden, hidden, 3),
            conv3: Conv3d::zeros(hidden, 2 * half, 1),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.cin * 2
    }

    fn net(&self, xb: &Tensor) -> NetCache {
        let mut a1 = self.conv1.forward(xb);
        relu(&mut a1);
        let mut a2 = self.conv2.forward(&a1);
        relu(&mut a2);
        let raw = self.conv3.forward(&a2);
        NetCache { a1, a2, raw }
    }

    /// Returns `(log g1, g2)` from the raw network output.
    fn scale_shift(raw: &Tensor) -> (Tensor, Tensor) {
        let (mut ls, shift) = raw.split_half();
        ls.data.iter_mut().for_each(|r| *r = ALPHA * (*r / ALPHA).tanh());
        (ls, shift)
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, f64) {
        let (xa, xb) = x.split_half();
        let (ls, shift) = Self::scale_shift(&self.net(&xb).raw);
        let mut ya = xa;
        for ((y, l), t) in ya.data.iter_mut().zip(&ls.data).zip(&shift.data) {
            *y = l.exp() * *y + t;
        }
        let logdet = ls.data.iter().sum();
        (Tensor::concat(&ya, &xb), logdet)
    }

    pub fn inverse(&self, y: &Tensor) -> Tensor {
        let (ya, xb) = y.split_half();
        let (ls, shift) = Self::scale_shift(&self.net(&xb).raw);
        let mut xa = ya;
        for ((x, l), t) in xa.data.iter_mut().zip(&ls.data).zip(&shift.data) {
            *x = (*x - t) * (-l).exp();
        }
        Tensor::concat(&xa, &xb)
    }

    /// Pulls `gy` back through the layer for a loss `f(y) + coef * logdet`.
    pub fn backward(&self, x: &Tensor, gy: &Tensor, coef: f64, grads: Option<&mut AffineCoupling>) -> Tensor {
        let (xa, xb) = x.split_half();
        let (gya, gyb) = gy.split_half();
        let cache = self.net(&xb);
        let half = xa.len();
        let mut graw = Tensor::zeros(cache.raw.channels, cache.raw.dims);
        let mut gxa = gya.clone();
        for i in 0..half {
            let th = (cache.raw.data[i] / ALPHA).tanh();
            let g1 = (ALPHA * th).exp();
            gxa.data[i] = gya.data[i] * g1;
            graw.data[i] = (gya.data[i] * xa.data[i] * g1 + coef) * (1.0 - th * th);
            graw.data[half + i] = gya.data[i];
        }
        let (g1, g2, g3) = match grads {
            Some(g) => (Some(&mut g.conv1), Some(&mut g.conv2), Some(&mut g.conv3)),
            None => (None, None, None),
        };
        let mut ga2 = self.conv3.backward(&cache.a2, &graw, g3);
        relu_backward(&cache.a2, &mut ga2);
        let mut ga1 = self.conv2.backward(&cache.a1, &ga2, g2);
        relu_backward(&cache.a1, &mut ga1);
        let mut gxb = self.conv1.backward(&xb, &ga1, g1);
        for (g, d) in gxb.data.iter_mut().zip(&gyb.data) {
            *g += d;
        }
        Tensor::concat(&gxa, &gxb)
    }
}

fn relu(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `g` where the post-activation value is not positive.
fn relu_backward(activated: &Tensor, g: &mut Tensor) {
    for (gv, a) in g.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *gv = 0.0;
        }
    }
}
