//! VOL1 binary format.
//!
//! ```text
//! "VOL1"            4 bytes magic
//! version           u8 (= 1)
//! nx, ny, nz        3 x u32 LE
//! spacing           f64 LE
//! values            nx*ny*nz x f64 LE, x fastest
//! ```

use std::fs;
use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VOL1";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 12 + 8;

pub fn write_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * v.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&v.spacing().to_le_bytes());
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn read_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let fmt = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt("bad magic, expected VOL1"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { path: path.to_path_buf(), expected: HEADER_LEN, found: bytes.len() });
    }
    if bytes[4] != VERSION {
        return Err(Error::Version { found: bytes[4] as u32, expected: VERSION as u32 });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let dims = [u32_at(5), u32_at(9), u32_at(13)];
    let spacing = f64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| fmt("dimension product overflows"))?;
    let expected = HEADER_LEN + 8 * n;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(fmt(&format!("payload of {} bytes does not match dims {dims:?}", bytes.len() - HEADER_LEN)));
    }
    let data = bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new(dims, spacing, data).map_err(|e| fmt(&e.to_string()))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_volume(&bytes, path)
}
