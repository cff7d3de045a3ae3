use serde::{Deserialize, Serialize};

use super::geometry::{half_diagonal, Geometry};
use crate::error::{Error, Result};
use crate::linalg::{power_iteration_history, DenseOperator, LinearOperator};
use crate::volume::{trilinear_stencil, Stencil, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    /// Sound speed in grid units per time unit.
    pub c0: f64,
    pub dt: f64,
    pub n_t: usize,
    /// Quadrature directions per sphere.
    pub n_dirs: usize,
}

impl TimeConfig {
    /// `dt = h / (2 c0)` and enough samples for the farthest voxel to be heard.
    pub fn default_for(dims: [usize; 3], spacing: f64, geometry: &Geometry) -> Self {
        let c0 = 1.0;
        let dt = spacing / (2.0 * c0);
        let t_max = (geometry.spec.radius + half_diagonal(dims, spacing)) / c0;
        Self { c0, dt, n_t: (t_max / dt).ceil() as usize + 3, n_dirs: 200 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(Error::Config(format!("c0 must be positive, got {}", self.c0)));
        }
        if self.n_t < 3 {
            return Err(Error::Config(format!("n_t must be at least 3, got {}", self.n_t)));
        }
        if self.n_dirs == 0 {
            return Err(Error::Config("n_dirs must be positive".into()));
        }
        Ok(())
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// Per-transducer pressure traces, transducer-major (`data[i * n_t + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub geometry: Geometry,
    pub time: TimeConfig,
    pub data: Vec<f64>,
}

impl MeasurementSet {
    pub fn new(geometry: Geometry, time: TimeConfig, data: Vec<f64>) -> Result<Self> {
        time.validate()?;
        if data.len() != geometry.len() * time.n_t {
            return Err(Error::Shape(format!(
                "measurement data has {} entries, expected {} transducers x {} samples",
                data.len(),
                geometry.len(),
                time.n_t
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measurement data".into()));
        }
        Ok(Self { geometry, time, data })
    }

    pub fn n_transducers(&self) -> usize {
        self.geometry.len()
    }

    pub fn trace(&self, i: usize) -> &[f64] {
        &self.data[i * self.time.n_t..(i + 1) * self.time.n_t]
    }
}

/// Deterministic, nearly uniform unit vectors on the sphere.
pub fn fibonacci_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (2 * k + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let (s, c) = (golden * k as f64).sin_cos();
            [r * c, r * s, z]
        })
        .collect()
}

/// Average of the trilinearly interpolated field over the sphere of radius `r`
/// around `center` (physical units).
pub fn spherical_mean(v: &Volume, center: [f64; 3], r: f64, n_dirs: usize) -> f64 {
    let inv_h = 1.0 / v.spacing();
    if r == 0.0 {
        return v.trilinear_sample(center.map(|c| c * inv_h));
    }
    let dirs = fibonacci_directions(n_dirs);
    let sum: f64 =
        dirs.iter().map(|d| v.trilinear_sample(std::array::from_fn(|a| (center[a] + r * d[a]) * inv_h))).sum();
    sum / n_dirs as f64
}

/// Matrix-free discrete Kirchhoff operator for a fixed grid, geometry and time axis.
#[derive(Debug, Clone)]
pub struct KirchhoffOperator {
    geometry: Geometry,
    time: TimeConfig,
    dims: [usize; 3],
    spacing: f64,
    dirs: Vec<[f64; 3]>,
}

impl KirchhoffOperator {
    pub fn new(geometry: Geometry, time: TimeConfig, dims: [usize; 3], spacing: f64) -> Result<Self> {
        time.validate()?;
        if dims.contains(&0) || !(spacing > 0.0) {
            return Err(Error::Shape(format!("bad grid {dims:?} with spacing {spacing}")));
        }
        let dirs = fibonacci_directions(time.n_dirs);
        Ok(Self { geometry, time, dims, spacing, dirs })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn time(&self) -> &TimeConfig {
        &self.time
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Visits the interpolation stencils of every in-grid quadrature point on the
    /// sphere of radius `r` around transducer position `pos`.
    #[inline]
    fn for_each_stencil(&self, pos: [f64; 3], r: f64, mut f: impl FnMut(&Stencil)) {
        let inv_h = 1.0 / self.spacing;
        let upper = self.dims.map(|n| (n - 1) as f64 * self.spacing);
        // distance range from pos to the grid box; skip shells that miss it
        let mut dmin2 = 0.0;
        let mut dmax2 = 0.0;
        for a in 0..3 {
            let below = (0.0 - pos[a]).max(pos[a] - upper[a]).max(0.0);
            dmin2 += below * below;
            let far = (pos[a] - 0.0).abs().max((pos[a] - upper[a]).abs());
            dmax2 += far * far;
        }
        let slack = 1e-9 * (1.0 + r);
        if r + slack < dmin2.sqrt() || r - slack > dmax2.sqrt() {
            return;
        }
        for d in &self.dirs {
            let p = [(pos[0] + r * d[0]) * inv_h, (pos[1] + r * d[1]) * inv_h, (pos[2] + r * d[2]) * inv_h];
            if let Some(st) = trilinear_stencil(self.dims, p) {
                f(&st);
            }
        }
    }

    /// Spherical-mean traces `q_i(t_k) = c0 t_k (A x)(pos_i, c0 t_k)`.
    fn mean_traces(&self, x: &[f64]) -> Vec<f64> {
        let n_t = self.time.n_t;
        let mut q = vec![0.0; self.geometry.len() * n_t];
        let norm = 1.0 / self.dirs.len() as f64;
        for (i, pos) in self.geometry.positions.iter().enumerate() {
            for k in 1..n_t {
                let r = self.time.c0 * self.time.time(k);
                let mut acc = 0.0;
                self.for_each_stencil(*pos, r, |st| acc += st.apply(x));
                q[i * n_t + k] = r * norm * acc;
            }
        }
        q
    }

    /// Applies the time-derivative stencil to each trace.
    fn differentiate(&self, q: &[f64]) -> Vec<f64> {
        let n_t = self.time.n_t;
        let dt = self.time.dt;
        let mut p = vec![0.0; q.len()];
        for (qi, pi) in q.chunks_exact(n_t).zip(p.chunks_exact_mut(n_t)) {
            pi[0] = (qi[1] - qi[0]) / dt;
            for k in 1..n_t - 1 {
                pi[k] = (qi[k + 1] - qi[k - 1]) / (2.0 * dt);
            }
            pi[n_t - 1] = (qi[n_t - 1] - qi[n_t - 2]) / dt;
        }
        p
    }

    /// Transpose of [`Self::differentiate`].
    fn differentiate_t(&self, p: &[f64]) -> Vec<f64> {
        let n_t = self.time.n_t;
        let dt = self.time.dt;
        let mut g = vec![0.0; p.len()];
        for (pi, gi) in p.chunks_exact(n_t).zip(g.chunks_exact_mut(n_t)) {
            gi[0] -= pi[0] / dt;
            gi[1] += pi[0] / dt;
            for k in 1..n_t - 1 {
                gi[k - 1] -= pi[k] / (2.0 * dt);
                gi[k + 1] += pi[k] / (2.0 * dt);
            }
            gi[n_t - 2] -= pi[n_t - 1] / dt;
            gi[n_t - 1] += pi[n_t - 1] / dt;
        }
        g
    }

    /// Transpose of [`Self::mean_traces`].
    fn mean_traces_t(&self, g: &[f64]) -> Vec<f64> {
        let n_t = self.time.n_t;
        let norm = 1.0 / self.dirs.len() as f64;
        let mut out = vec![0.0; self.n_voxels()];
        for (i, pos) in self.geometry.positions.iter().enumerate() {
            for k in 1..n_t {
                let gk = g[i * n_t + k];
                if gk == 0.0 {
                    continue;
                }
                let r = self.time.c0 * self.time.time(k);
                let w = r * norm * gk;
                self.for_each_stencil(*pos, r, |st| st.scatter(&mut out, w));
            }
        }
        out
    }

    pub fn forward(&self, v: &Volume) -> Result<MeasurementSet> {
        if v.dims() != self.dims {
            return Err(Error::Shape(format!("volume dims {:?} do not match operator dims {:?}", v.dims(), self.dims)));
        }
        let data = self.apply(v.data());
        Ok(MeasurementSet { geometry: self.geometry.clone(), time: self.time, data })
    }

    pub fn adjoint_volume(&self, m: &MeasurementSet) -> Result<Volume> {
        if m.data.len() != self.range_len() {
            return Err(Error::Shape(format!(
                "measurement length {} does not match operator range {}",
                m.data.len(),
                self.range_len()
            )));
        }
        Ok(Volume::from_raw(self.dims, self.spacing, self.adjoint(&m.data)))
    }

    pub fn operator_norm_sq(&self, iters: usize, seed: u64) -> f64 {
        power_iteration_history(self, iters.max(1), seed).last().copied().unwrap_or(0.0)
    }
}

impl LinearOperator for KirchhoffOperator {
    fn domain_len(&self) -> usize {
        self.n_voxels()
    }

    fn range_len(&self) -> usize {
        self.geometry.len() * self.time.n_t
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.domain_len(), "operator input length");
        self.differentiate(&self.mean_traces(x))
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.range_len(), "operator adjoint input length");
        self.mean_traces_t(&self.differentiate_t(y))
    }
}

pub fn forward_apply(v: &Volume, g: &Geometry, t: &TimeConfig) -> Result<MeasurementSet> {
    KirchhoffOperator::new(g.clone(), *t, v.dims(), v.spacing())?.forward(v)
}

pub fn adjoint_apply(m: &MeasurementSet, dims: [usize; 3]) -> Result<Volume> {
    KirchhoffOperator::new(m.geometry.clone(), m.time, dims, 1.0)?.adjoint_volume(m)
}

const DENSE_LIMIT: usize = 1024;

/// Dense matrix of the operator on a unit-spacing grid; column `j` is `F e_j`.
pub fn materialize_dense(g: &Geometry, t: &TimeConfig, dims: [usize; 3]) -> Result<DenseOperator> {
    let n: usize = dims.iter().product();
    if n > DENSE_LIMIT {
        return Err(Error::Config(format!(
            "grid {dims:?} has {n} voxels; dense materialization is limited to {DENSE_LIMIT}"
        )));
    }
    let op = KirchhoffOperator::new(g.clone(), *t, dims, 1.0)?;
    let rows = op.range_len();
    let mut data = vec![0.0; rows * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        for (i, v) in op.apply(&e).into_iter().enumerate() {
            data[i * n + j] = v;
        }
        e[j] = 0.0;
    }
    DenseOperator::new(rows, n, data)
}

/// Power-iteration estimate of the largest eigenvalue of `F^T F` on a unit-spacing grid.
pub fn operator_norm_sq(g: &Geometry, t: &TimeConfig, dims: [usize; 3], iters: usize, seed: u64) -> Result<f64> {
    if iters == 0 {
        return Err(Error::Config("power iteration needs at least one iteration".into()));
    }
    Ok(KirchhoffOperator::new(g.clone(), *t, dims, 1.0)?.operator_norm_sq(iters, seed))
}
