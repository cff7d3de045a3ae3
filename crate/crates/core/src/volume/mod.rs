//! Scalar volumes on a regular grid, trilinear sampling, binary persistence,
//! synthetic vessel phantoms and training-time augmentation.
//!
//! Linear index order is x-fastest: `i = x + nx * (y + ny * z)`.

mod augment;
mod io;
mod phantom;

pub use augment::{apply_affine, augment, AffineParams, AugmentConfig};
pub use io::{load_volume, read_volume, save_volume, write_volume};
pub use phantom::{generate_phantom, PhantomConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: f64,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: f64, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero dimension in {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!("data length {} does not match dims {dims:?} ({n} voxels)", data.len())));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::Config(format!("spacing must be positive, got {spacing}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume value at linear index {i}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, spacing: 1.0, data: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    /// Builds a volume from raw data without the finiteness scan. Shapes must agree.
    pub(crate) fn from_raw(dims: [usize; 3], spacing: f64, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Self { dims, spacing, data }
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f64) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Geometric center in voxel coordinates.
    pub fn center_voxel(&self) -> [f64; 3] {
        [(self.dims[0] - 1) as f64 / 2.0, (self.dims[1] - 1) as f64 / 2.0, (self.dims[2] - 1) as f64 / 2.0]
    }

    /// Trilinear interpolation at a point in voxel coordinates; zero outside `[0, N-1]^3`.
    pub fn trilinear_sample(&self, p: [f64; 3]) -> f64 {
        match trilinear_stencil(self.dims, p) {
            Some(st) => st.apply(&self.data),
            None => 0.0,
        }
    }

    /// Extracts the sub-volume starting at `start` with extent `size`.
    pub fn extract(&self, start: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if start[a] + size[a] > self.dims[a] {
                return Err(Error::Shape(format!("patch {start:?}+{size:?} exceeds dims {:?}", self.dims)));
            }
        }
        let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
        for z in 0..size[2] {
            for y in 0..size[1] {
                let row = self.index(start[0], start[1] + y, start[2] + z);
                out.extend_from_slice(&self.data[row..row + size[0]]);
            }
        }
        Ok(Volume::from_raw(size, self.spacing, out))
    }

    /// Adds `scale * patch` into the region starting at `start`.
    pub fn add_patch(&mut self, start: [usize; 3], patch: &Volume, scale: f64) {
        let size = patch.dims;
        for z in 0..size[2] {
            for y in 0..size[1] {
                let row = self.index(start[0], start[1] + y, start[2] + z);
                let src = &patch.data[size[0] * (y + size[1] * z)..][..size[0]];
                for (d, s) in self.data[row..row + size[0]].iter_mut().zip(src) {
                    *d += scale * s;
                }
            }
        }
    }

    /// Trilinear upsampling by two: `2N-1` samples per axis at half the spacing,
    /// covering the same physical extent.
    pub fn upsample2(&self) -> Volume {
        let dims = self.dims.map(|n| 2 * n - 1);
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(self.trilinear_sample([x as f64 / 2.0, y as f64 / 2.0, z as f64 / 2.0]));
                }
            }
        }
        Volume::from_raw(dims, self.spacing / 2.0, data)
    }
}

/// The eight corner weights of a trilinear interpolation. Corners that fall on a
/// degenerate (single-sample) axis carry zero weight but a valid index.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl Stencil {
    #[inline]
    pub fn apply(&self, data: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..8 {
            acc += self.w[k] * data[self.idx[k]];
        }
        acc
    }

    #[inline]
    pub fn scatter(&self, data: &mut [f64], value: f64) {
        for k in 0..8 {
            data[self.idx[k]] += self.w[k] * value;
        }
    }
}

#[inline]
fn axis_split(n: usize, p: f64) -> Option<(usize, usize, f64)> {
    if !(p >= 0.0 && p <= (n - 1) as f64) {
        return None;
    }
    if n == 1 {
        return Some((0, 0, 0.0));
    }
    let mut i0 = p.floor() as usize;
    if i0 >= n - 1 {
        i0 = n - 2;
    }
    Some((i0, i0 + 1, p - i0 as f64))
}

/// Trilinear stencil for a point in voxel coordinates, `None` outside the grid.
#[inline]
pub fn trilinear_stencil(dims: [usize; 3], p: [f64; 3]) -> Option<Stencil> {
    let (x0, x1, fx) = axis_split(dims[0], p[0])?;
    let (y0, y1, fy) = axis_split(dims[1], p[1])?;
    let (z0, z1, fz) = axis_split(dims[2], p[2])?;
    let sx = dims[0];
    let sxy = dims[0] * dims[1];
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    Some(Stencil {
        idx: [
            x0 + sx * y0 + sxy * z0,
            x1 + sx * y0 + sxy * z0,
            x0 + sx * y1 + sxy * z0,
            x1 + sx * y1 + sxy * z0,
            x0 + sx * y0 + sxy * z1,
            x1 + sx * y0 + sxy * z1,
            x0 + sx * y1 + sxy * z1,
            x1 + sx * y1 + sxy * z1,
        ],
        w: [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ],
    })
}
