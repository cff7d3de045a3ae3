//! NFCK checkpoint format.
//!
//! ```text
//! "NFCK"                      4 bytes magic
//! version                     u16 LE (= 1)
//! levels, steps_per_level,
//! hidden_channels, channels,
//! nx, ny, nz                  7 x u32 LE
//! seed                        u64 LE
//! dataset_size                u64 LE
//! C                           f64 LE
//! for each level, each step:  perm (C_k x u32 LE), sign (C_k x f64 LE)
//! n_params                    u64 LE
//! params                      n_params x f64 LE, in `Flow::params` order
//! n_epochs                    u32 LE
//! curve                       n_epochs x (nats f64, nats_per_dim f64)
//! ```
//!
//! All parameters are stored at full precision, so a round trip is bitwise.

use std::fs;
use std::path::Path;

use super::EpochStats;
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowArch};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"NFCK";

/// A trained flow together with its training curve and reference constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub flow: Flow,
    pub curve: Vec<EpochStats>,
    /// Mean `R` over the training set under the stored parameters.
    pub c: f64,
    pub seed: u64,
    pub dataset_size: usize,
}

impl Checkpoint {
    pub fn arch(&self) -> FlowArch {
        self.flow.arch
    }
}

pub fn write_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let flow = &ck.flow;
    let a = flow.arch;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [a.levels, a.steps_per_level, a.hidden_channels, a.channels, a.dims[0], a.dims[1], a.dims[2]] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.extend_from_slice(&(ck.dataset_size as u64).to_le_bytes());
    out.extend_from_slice(&ck.c.to_le_bytes());
    for step in flow.levels.iter().flatten() {
        for &p in &step.invconv.perm {
            out.extend_from_slice(&(p as u32).to_le_bytes());
        }
        for &s in &step.invconv.sign {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    let params = flow.params_flat();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&(ck.curve.len() as u32).to_le_bytes());
    for e in &ck.curve {
        out.extend_from_slice(&e.nats.to_le_bytes());
        out.extend_from_slice(&e.nats_per_dim.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated { path: self.path.to_path_buf(), expected: end, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn format(&self, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), msg: msg.into() }
    }
}

pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(r.format("bad magic, expected NFCK"));
    }
    r.take(4)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version as u32, expected: CHECKPOINT_VERSION as u32 });
    }
    let arch = FlowArch {
        levels: r.u32()?,
        steps_per_level: r.u32()?,
        hidden_channels: r.u32()?,
        channels: r.u32()?,
        dims: [r.u32()?, r.u32()?, r.u32()?],
    };
    arch.validate().map_err(|e| r.format(format!("invalid architecture: {e}")))?;
    let seed = r.u64()?;
    let dataset_size = r.u64()? as usize;
    let c = r.f64()?;
    let mut flow = Flow::identity(arch)?;
    for step in flow.levels.iter_mut().flatten() {
        let n = step.invconv.channels();
        let mut seen = vec![false; n];
        for i in 0..n {
            let p = r.u32()?;
            if p >= n || seen[p] {
                return Err(r.format("mixing permutation is not a permutation"));
            }
            seen[p] = true;
            step.invconv.perm[i] = p;
        }
        for i in 0..n {
            let s = r.f64()?;
            if s != 1.0 && s != -1.0 {
                return Err(r.format("mixing sign must be +1 or -1"));
            }
            step.invconv.sign[i] = s;
        }
    }
    let n_params = r.u64()? as usize;
    if n_params != flow.num_params() {
        return Err(Error::Shape(format!(
            "checkpoint stores {n_params} parameters, architecture needs {}",
            flow.num_params()
        )));
    }
    let raw = r.take(8 * n_params)?;
    let params: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    flow.set_params_flat(&params)?;
    let n_epochs = r.u32()?;
    let mut curve = Vec::with_capacity(n_epochs.min(1 << 20));
    for _ in 0..n_epochs {
        curve.push(EpochStats { nats: r.f64()?, nats_per_dim: r.f64()? });
    }
    if r.pos != bytes.len() {
        return Err(r.format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { flow, curve, c, seed, dataset_size })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let arch = FlowArch { levels: 2, steps_per_level: 1, hidden_channels: 3, channels: 1, dims: [4, 4, 4] };
        Checkpoint {
            flow: Flow::random(arch, 11, 0.3).unwrap(),
            curve: vec![
                EpochStats { nats: 10.5, nats_per_dim: 10.5 / 64.0 },
                EpochStats { nats: 9.25, nats_per_dim: 9.25 / 64.0 },
            ],
            c: 8.125,
            seed: 42,
            dataset_size: 7,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = write_checkpoint(&ck);
        let back = read_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = write_checkpoint(&sample());
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(read_checkpoint(&bad, p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&bad, p), Err(Error::Version { found: 9, .. })));
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3], p), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(read_checkpoint(&bad, p), Err(Error::Format { .. })));
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut bytes = write_checkpoint(&sample());
        // hidden channels field
        bytes[14..18].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(read_checkpoint(&bytes, Path::new("mem")), Err(Error::Shape(_))));
    }
}
