use crate::error::{Error, Result};

/// Multi-channel volume, channel-major: `data[c * V + i]` with `i` the x-fastest
/// voxel index and `V` the voxel count.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {channels} x {dims:?}",
                data.len()
            )));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self { channels, dims, data: vec![0.0; channels * dims[0] * dims[1] * dims[2]] }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Splits channels into the first and second halves.
    pub fn split_half(&self) -> (Tensor, Tensor) {
        let half = self.channels / 2;
        let cut = half * self.voxels();
        (
            Tensor { channels: half, dims: self.dims, data: self.data[..cut].to_vec() },
            Tensor { channels: self.channels - half, dims: self.dims, data: self.data[cut..].to_vec() },
        )
    }

    /// Channel concatenation, the inverse of [`Tensor::split_half`].
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!(a.dims, b.dims);
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor { channels: a.channels + b.channels, dims: a.dims, data }
    }
}

/// Space-to-channel by two along every axis: `(C, X, Y, Z) -> (8C, X/2, Y/2, Z/2)`.
/// Output channel `8c + dx + 2dy + 4dz` holds the sub-lattice at offset `(dx, dy, dz)`.
pub fn squeeze(x: &Tensor) -> Result<Tensor> {
    if x.dims.iter().any(|n| n % 2 != 0) {
        return Err(Error::Shape(format!("cannot squeeze odd spatial dims {:?}", x.dims)));
    }
    let [nx, ny, nz] = x.dims;
    let od = [nx / 2, ny / 2, nz / 2];
    let ov = od[0] * od[1] * od[2];
    let mut out = Tensor::zeros(8 * x.channels, od);
    for c in 0..x.channels {
        let src = x.channel(c);
        for z in 0..nz {
            for y in 0..ny {
                for xx in 0..nx {
                    let sub = (xx & 1) + 2 * (y & 1) + 4 * (z & 1);
                    let o = (xx >> 1) + od[0] * ((y >> 1) + od[1] * (z >> 1));
                    out.data[(8 * c + sub) * ov + o] = src[xx + nx * (y + ny * z)];
                }
            }
        }
    }
    Ok(out)
}

pub fn unsqueeze(y: &Tensor) -> Result<Tensor> {
    if !y.channels.is_multiple_of(8) {
        return Err(Error::Shape(format!("cannot unsqueeze {} channels", y.channels)));
    }
    let od = y.dims;
    let [nx, ny, nz] = od.map(|n| 2 * n);
    let ov = od[0] * od[1] * od[2];
    let c_out = y.channels / 8;
    let mut out = Tensor::zeros(c_out, [nx, ny, nz]);
    for c in 0..c_out {
        let dst = &mut out.data[c * nx * ny * nz..(c + 1) * nx * ny * nz];
        for z in 0..nz {
            for yy in 0..ny {
                for x in 0..nx {
                    let sub = (x & 1) + 2 * (yy & 1) + 4 * (z & 1);
                    let o = (x >> 1) + od[0] * ((yy >> 1) + od[1] * (z >> 1));
                    dst[x + nx * (yy + ny * z)] = y.data[(8 * c + sub) * ov + o];
                }
            }
        }
    }
    Ok(out)
}
