use super::Tensor;

/// 3-D convolution with zero "same" padding, kernel 1 or 3 per axis, plus bias.
///
/// Weights are indexed `[co][ci][kz][ky][kx]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn zeros(cin: usize, cout: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        Self { cin, cout, kernel, weight: vec![0.0; cout * cin * kernel.pow(3)], bias: vec![0.0; cout] }
    }

    fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    /// Unfolded input: row `ci * taps + tap` is channel `ci` shifted by the tap offset.
    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        if self.kernel == 1 {
            return x.data.clone();
        }
        let [nx, ny, nz] = x.dims;
        let v = x.voxels();
        let mut col = vec![0.0; self.cin * 27 * v];
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for tap in 0..27 {
                let (dx, dy, dz) = tap_offset(tap);
                let row = &mut col[(ci * 27 + tap) * v..(ci * 27 + tap + 1) * v];
                let (x0, x1) = valid_range(nx, dx);
                if x0 >= x1 {
                    continue;
                }
                let (y0, y1) = valid_range(ny, dy);
                let (z0, z1) = valid_range(nz, dz);
                for z in z0..z1 {
                    for y in y0..y1 {
                        let o = nx * (y + ny * z);
                        let s = ((o + x0) as isize + dx + (nx as isize) * (dy + ny as isize * dz)) as usize;
                        row[o + x0..o + x1].copy_from_slice(&src[s..s + x1 - x0]);
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Self::im2col`].
    fn col2im(&self, col: &[f64], dims: [usize; 3]) -> Tensor {
        if self.kernel == 1 {
            return Tensor { channels: self.cin, dims, data: col.to_vec() };
        }
        let [nx, ny, nz] = dims;
        let mut x = Tensor::zeros(self.cin, dims);
        let v = x.voxels();
        for ci in 0..self.cin {
            let dst = x.channel_mut(ci);
            for tap in 0..27 {
                let (dx, dy, dz) = tap_offset(tap);
                let row = &col[(ci * 27 + tap) * v..(ci * 27 + tap + 1) * v];
                let (x0, x1) = valid_range(nx, dx);
                if x0 >= x1 {
                    continue;
                }
                let (y0, y1) = valid_range(ny, dy);
                let (z0, z1) = valid_range(nz, dz);
                for z in z0..z1 {
                    for y in y0..y1 {
                        let o = nx * (y + ny * z);
                        let s = ((o + x0) as isize + dx + (nx as isize) * (dy + ny as isize * dz)) as usize;
                        for (d, c) in dst[s..s + x1 - x0].iter_mut().zip(&row[o + x0..o + x1]) {
                            *d += c;
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.cin);
        let v = x.voxels();
        let col = self.im2col(x);
        let rows = self.cin * self.taps();
        let mut y = Tensor::zeros(self.cout, x.dims);
        for co in 0..self.cout {
            let out = &mut y.data[co * v..(co + 1) * v];
            out.fill(self.bias[co]);
            let w = &self.weight[co * rows..(co + 1) * rows];
            for (r, &wr) in w.iter().enumerate() {
                if wr == 0.0 {
                    continue;
                }
                for (o, c) in out.iter_mut().zip(&col[r * v..(r + 1) * v]) {
                    *o += wr * c;
                }
            }
        }
        y
    }

    /// Returns the input gradient and accumulates parameter gradients into `grads`.
    pub fn backward(&self, x: &Tensor, gy: &Tensor, grads: Option<&mut Conv3d>) -> Tensor {
        let v = x.voxels();
        let rows = self.cin * self.taps();
        let col = self.im2col(x);
        if let Some(g) = grads {
            for co in 0..self.cout {
                let go = &gy.data[co * v..(co + 1) * v];
                g.bias[co] += go.iter().sum::<f64>();
                let gw = &mut g.weight[co * rows..(co + 1) * rows];
                for (r, gwr) in gw.iter_mut().enumerate() {
                    *gwr += go.iter().zip(&col[r * v..(r + 1) * v]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let mut gcol = col;
        gcol.fill(0.0);
        for co in 0..self.cout {
            let go = &gy.data[co * v..(co + 1) * v];
            let w = &self.weight[co * rows..(co + 1) * rows];
            for (r, &wr) in w.iter().enumerate() {
                if wr == 0.0 {
                    continue;
                }
                for (d, g) in gcol[r * v..(r + 1) * v].iter_mut().zip(go) {
                    *d += wr * g;
                }
            }
        }
        self.col2im(&gcol, x.dims)
    }
}

#[inline]
fn tap_offset(tap: usize) -> (isize, isize, isize) {
    ((tap % 3) as isize - 1, ((tap / 3) % 3) as isize - 1, (tap / 9) as isize - 1)
}

/// Output positions `p` in `0..n` for which `p + d` is inside `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.min(n))
}
