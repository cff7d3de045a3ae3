//! MES1 measurement files and their structured-text sidecar.
//!
//! ```text
//! "MES1"       4 bytes magic
//! version      u8 (= 1)
//! M            u32 LE, number of transducers
//! n_t          u32 LE, samples per transducer
//! dt           f64 LE
//! c0           f64 LE
//! values       M*n_t x f64 LE, transducer-major
//! ```
//!
//! The sidecar `<file>.toml` holds the geometry parameters, the quadrature
//! direction count, the transducer positions, and optional provenance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Geometry, GeometrySpec, MeasurementSet, TimeConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MES1";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 8 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source: String,
    pub sigma: f64,
    pub noise_seed: u64,
    pub upsampled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSidecar {
    pub geometry: GeometrySpec,
    pub n_dirs: usize,
    pub provenance: Option<Provenance>,
    pub positions: Vec<[f64; 3]>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn save_measurements(m: &MeasurementSet, path: impl AsRef<Path>, provenance: Option<Provenance>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(m.n_transducers() as u32).to_le_bytes());
    out.extend_from_slice(&(m.time.n_t as u32).to_le_bytes());
    out.extend_from_slice(&m.time.dt.to_le_bytes());
    out.extend_from_slice(&m.time.c0.to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;

    let sidecar = MeasurementSidecar {
        geometry: m.geometry.spec,
        n_dirs: m.time.n_dirs,
        provenance,
        positions: m.geometry.positions.clone(),
    };
    let text = toml::to_string(&sidecar).map_err(|e| Error::Config(format!("sidecar encoding: {e}")))?;
    let sp = sidecar_path(path);
    fs::write(&sp, text).map_err(|e| Error::io(sp, e))
}

pub fn load_measurements(path: impl AsRef<Path>) -> Result<(MeasurementSet, Option<Provenance>)> {
    let path = path.as_ref();
    let fmt = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt("bad magic, expected MES1".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { path: path.to_path_buf(), expected: HEADER_LEN, found: bytes.len() });
    }
    if bytes[4] != VERSION {
        return Err(Error::Version { found: bytes[4] as u32, expected: VERSION as u32 });
    }
    let m = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let n_t = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let dt = f64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let c0 = f64::from_le_bytes(bytes[21..29].try_into().unwrap());
    let expected = HEADER_LEN + 8 * m * n_t;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(fmt(format!("payload longer than {m} x {n_t} samples")));
    }
    let data: Vec<f64> =
        bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let sidecar: MeasurementSidecar =
        toml::from_str(&text).map_err(|e| Error::Format { path: sp.clone(), msg: e.to_string() })?;
    let geometry = Geometry::try_from(sidecar.geometry)?;
    if geometry.len() != m {
        return Err(fmt(format!("sidecar geometry has {} transducers, file has {m}", geometry.len())));
    }
    let time = TimeConfig { c0, dt, n_t, n_dirs: sidecar.n_dirs };
    Ok((MeasurementSet::new(geometry, time, data)?, sidecar.provenance))
}
