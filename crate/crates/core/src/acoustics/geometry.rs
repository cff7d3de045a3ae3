use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// The parameters a geometry is built from; what gets persisted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub n_azimuth: usize,
    pub n_polar: usize,
    pub radius: f64,
    pub center: [f64; 3],
}

/// Transducers on the upper hemisphere `(pos - center)_z >= 0`.
///
/// Positions are ordered polar-major: index `j * n_azimuth + i` holds azimuth
/// `i` on polar ring `j`. Polar angle is measured from the +z axis; with more
/// than one ring they span `[0, 90]` degrees inclusive, a single ring sits on
/// the equator.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub spec: GeometrySpec,
    pub positions: Vec<[f64; 3]>,
}

impl Geometry {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Hemisphere centered on the volume with radius 1.2x its half diagonal.
    pub fn default_for(v_dims: [usize; 3], spacing: f64, n_azimuth: usize, n_polar: usize) -> Result<Self> {
        let center = v_dims.map(|n| (n - 1) as f64 * spacing / 2.0);
        build_geometry(n_azimuth, n_polar, 1.2 * half_diagonal(v_dims, spacing), center)
    }
}

pub(crate) fn half_diagonal(dims: [usize; 3], spacing: f64) -> f64 {
    0.5 * spacing * dims.iter().map(|&n| ((n - 1) as f64).powi(2)).sum::<f64>().sqrt()
}

impl TryFrom<GeometrySpec> for Geometry {
    type Error = Error;

    fn try_from(s: GeometrySpec) -> Result<Self> {
        build_geometry(s.n_azimuth, s.n_polar, s.radius, s.center)
    }
}

pub fn build_geometry(n_azimuth: usize, n_polar: usize, radius: f64, center: [f64; 3]) -> Result<Geometry> {
    if n_azimuth == 0 || n_polar == 0 {
        return Err(Error::Config(format!("transducer counts must be positive, got ({n_azimuth}, {n_polar})")));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::Config(format!("radius must be positive, got {radius}")));
    }
    let mut positions = Vec::with_capacity(n_azimuth * n_polar);
    for j in 0..n_polar {
        let (sp, cp) = if n_polar == 1 || j == n_polar - 1 {
            // exact equator; cos(pi/2) is not zero in floating point
            (1.0, 0.0)
        } else {
            (std::f64::consts::FRAC_PI_2 * j as f64 / (n_polar - 1) as f64).sin_cos()
        };
        for i in 0..n_azimuth {
            let az = 2.0 * std::f64::consts::PI * i as f64 / n_azimuth as f64;
            let (sa, ca) = az.sin_cos();
            positions.push([center[0] + radius * sp * ca, center[1] + radius * sp * sa, center[2] + radius * cp]);
        }
    }
    Ok(Geometry { spec: GeometrySpec { n_azimuth, n_polar, radius, center }, positions })
}

/// Checks that the hemisphere encloses the volume's circumscribing sphere.
pub(crate) fn check_encloses(g: &Geometry, v: &Volume) -> Result<()> {
    let hd = half_diagonal(v.dims(), v.spacing());
    if g.spec.radius <= hd {
        return Err(Error::Config(format!(
            "hemisphere radius {} does not enclose the volume (half diagonal {hd})",
            g.spec.radius
        )));
    }
    Ok(())
}
