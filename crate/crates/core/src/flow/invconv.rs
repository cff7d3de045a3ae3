use super::Tensor;

/// Invertible channel mixing `y = W x` at every voxel with `W = P L U`:
/// `P` a fixed permutation, `L` unit lower triangular, `U` upper triangular
/// with diagonal `sign * exp(log_diag)`.
///
/// `lower` and `upper` are stored as dense row-major `C x C` arrays of which
/// only the strict lower and strict upper parts are used.
#[derive(Debug, Clone, PartialEq)]
pub struct InvConv1x1 {
    /// `(P M)_i = M_{perm[i]}`.
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub log_diag: Vec<f64>,
}

impl InvConv1x1 {
    pub fn identity(c: usize) -> Self {
        Self {
            perm: (0..c).collect(),
            sign: vec![1.0; c],
            lower: vec![0.0; c * c],
            upper: vec![0.0; c * c],
            log_diag: vec![0.0; c],
        }
    }

    /// PLU factors of an arbitrary invertible matrix (row-major), by Gaussian
    /// elimination with partial pivoting.
    pub fn from_matrix(c: usize, w: &[f64]) -> Self {
        let mut a = w.to_vec();
        let mut piv: Vec<usize> = (0..c).collect();
        for k in 0..c {
            let p = (k..c).max_by(|&i, &j| a[i * c + k].abs().total_cmp(&a[j * c + k].abs())).unwrap();
            if p != k {
                for j in 0..c {
                    a.swap(k * c + j, p * c + j);
                }
                piv.swap(k, p);
            }
            let d = a[k * c + k];
            for i in k + 1..c {
                let f = a[i * c + k] / d;
                a[i * c + k] = f;
                for j in k + 1..c {
                    a[i * c + j] -= f * a[k * c + j];
                }
            }
        }
        // row i of L U is row piv[i] of W, so perm is the inverse of piv
        let mut lower = vec![0.0; c * c];
        let mut upper = vec![0.0; c * c];
        let mut sign = vec![1.0; c];
        let mut log_diag = vec![0.0; c];
        for i in 0..c {
            for j in 0..c {
                if i > j {
                    lower[i * c + j] = a[i * c + j];
                } else if i < j {
                    upper[i * c + j] = a[i * c + j];
                }
            }
            sign[i] = a[i * c + i].signum();
            log_diag[i] = a[i * c + i].abs().ln();
        }
        let mut perm = vec![0; c];
        for (i, &p) in piv.iter().enumerate() {
            perm[p] = i;
        }
        Self { perm, sign, lower, upper, log_diag }
    }

    pub fn channels(&self) -> usize {
        self.sign.len()
    }

    fn l_matrix(&self) -> Vec<f64> {
        let c = self.channels();
        let mut l = vec![0.0; c * c];
        for i in 0..c {
            l[i * c + i] = 1.0;
            for j in 0..i {
                l[i * c + j] = self.lower[i * c + j];
            }
        }
        l
    }

    fn u_matrix(&self) -> Vec<f64> {
        let c = self.channels();
        let mut u = vec![0.0; c * c];
        for i in 0..c {
            u[i * c + i] = self.sign[i] * self.log_diag[i].exp();
            for j in i + 1..c {
                u[i * c + j] = self.upper[i * c + j];
            }
        }
        u
    }

    /// Dense `W = P L U`, row-major.
    pub fn weight(&self) -> Vec<f64> {
        let c = self.channels();
        let l = self.l_matrix();
        let u = self.u_matrix();
        let mut lu = vec![0.0; c * c];
        for i in 0..c {
            for k in 0..=i {
                let lik = l[i * c + k];
                for j in k..c {
                    lu[i * c + j] += lik * u[k * c + j];
                }
            }
        }
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            let src = self.perm[i];
            w[i * c..(i + 1) * c].copy_from_slice(&lu[src * c..(src + 1) * c]);
        }
        w
    }

    pub fn logdet(&self, voxels: usize) -> f64 {
        voxels as f64 * self.log_diag.iter().sum::<f64>()
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, f64) {
        (mix(&self.weight(), x, false), self.logdet(x.voxels()))
    }

    pub fn inverse(&self, y: &Tensor) -> Tensor {
        let c = self.channels();
        let v = y.voxels();
        // W^{-1} y = U^{-1} L^{-1} P^T y, with (P^T y)_{perm[i]} = y_i
        let mut x = Tensor::zeros(c, y.dims);
        for i in 0..c {
            let dst = self.perm[i];
            x.data[dst * v..(dst + 1) * v].copy_from_slice(y.channel(i));
        }
        for i in 0..c {
            for j in 0..i {
                let l = self.lower[i * c + j];
                if l != 0.0 {
                    let (head, tail) = x.data.split_at_mut(i * v);
                    let src = &head[j * v..(j + 1) * v];
                    for (d, s) in tail[..v].iter_mut().zip(src) {
                        *d -= l * s;
                    }
                }
            }
        }
        for i in (0..c).rev() {
            for j in i + 1..c {
                let u = self.upper[i * c + j];
                if u != 0.0 {
                    let (head, tail) = x.data.split_at_mut(j * v);
                    let src = &tail[..v];
                    for (d, s) in head[i * v..(i + 1) * v].iter_mut().zip(src) {
                        *d -= u * s;
                    }
                }
            }
            let inv = 1.0 / (self.sign[i] * self.log_diag[i].exp());
            x.channel_mut(i).iter_mut().for_each(|e| *e *= inv);
        }
        x
    }

    pub fn backward(&self, x: &Tensor, gy: &Tensor, coef: f64, grads: Option<&mut InvConv1x1>) -> Tensor {
        let c = self.channels();
        let w = self.weight();
        let gx = mix(&w, gy, true);
        if let Some(g) = grads {
            // G = sum over voxels of gy x^T
            let mut gw = vec![0.0; c * c];
            for i in 0..c {
                let gi = gy.channel(i);
                for j in 0..c {
                    gw[i * c + j] = gi.iter().zip(x.channel(j)).map(|(a, b)| a * b).sum();
                }
            }
            // P^T G: row perm[i] of the result is row i of G
            let mut ptg = vec![0.0; c * c];
            for i in 0..c {
                let dst = self.perm[i];
                ptg[dst * c..(dst + 1) * c].copy_from_slice(&gw[i * c..(i + 1) * c]);
            }
            let l = self.l_matrix();
            let u = self.u_matrix();
            // dL = P^T G U^T (strict lower), dU = L^T P^T G (upper)
            for i in 0..c {
                for j in 0..i {
                    let s: f64 = (j..c).map(|k| ptg[i * c + k] * u[j * c + k]).sum();
                    g.lower[i * c + j] += s;
                }
            }
            for i in 0..c {
                for j in i..c {
                    let s: f64 = (i..c).map(|k| l[k * c + i] * ptg[k * c + j]).sum();
                    if i == j {
                        g.log_diag[i] += s * u[i * c + i] + coef * x.voxels() as f64;
                    } else {
                        g.upper[i * c + j] += s;
                    }
                }
            }
        }
        gx
    }
}

/// `y = W x` per voxel, or `W^T x` when `transpose`.
fn mix(w: &[f64], x: &Tensor, transpose: bool) -> Tensor {
    let c = x.channels;
    let mut y = Tensor::zeros(c, x.dims);
    let v = x.voxels();
    for i in 0..c {
        let dst = &mut y.data[i * v..(i + 1) * v];
        for j in 0..c {
            let wij = if transpose { w[j * c + i] } else { w[i * c + j] };
            if wij == 0.0 {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(&x.data[j * v..(j + 1) * v]) {
                *d += wij * s;
            }
        }
    }
    y
}
