//! Binary checkpoints: `MSAR`, version, config digest, step, then a named
//! parameter table and optional Adam moments, all little-endian with
//! 32-bit values.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

use super::optim::OptimizerState;

pub const MAGIC: &[u8; 4] = b"MSAR";
pub const VERSION: u16 = 1;

pub type ConfigDigest = [u8; 32];

/// SHA-256 of a canonical config serialization.
pub fn config_digest(canonical: &str) -> ConfigDigest {
    Sha256::digest(canonical.as_bytes()).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredOptimizer {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: ConfigDigest,
    pub step: u64,
    pub params: Vec<StoredParam>,
    pub optimizer: Option<StoredOptimizer>,
}

fn put_f32s(out: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn capture(store: &ParamStore<f64>, optimizer: Option<&OptimizerState>, step: u64, digest: ConfigDigest) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| StoredParam {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let to32 = |xs: &[Vec<f64>]| xs.iter().map(|x| x.iter().map(|&v| v as f32).collect()).collect();
        Self { digest, step, params, optimizer: optimizer.map(|o| StoredOptimizer { step: o.step, m: to32(&o.m), v: to32(&o.v) }) }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, p.values.iter().map(|&v| f64::from(v)));
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for x in o.m.iter().chain(&o.v) {
                    put_f32s(&mut out, x.iter().map(|&v| f64::from(v)));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let digest: ConfigDigest = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let values = r.f32s(shape.iter().product())?;
            params.push(StoredParam { name, shape, values });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let sizes: Vec<usize> = params.iter().map(|p| p.values.len()).collect();
                let m = sizes.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
                Some(StoredOptimizer { step, m, v })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { digest, step, params, optimizer })
    }

    /// Copies the stored values into `store` after checking that names and
    /// shapes line up; nothing is written unless every check passes.
    pub fn apply(&self, store: &mut ParamStore<f64>, expected: ConfigDigest, allow_digest_mismatch: bool) -> Result<Option<OptimizerState>> {
        if self.digest != expected {
            if !allow_digest_mismatch {
                return Err(Error::Checkpoint(
                    "checkpoint was written for a different configuration (digest mismatch); pass the override flag to load anyway".into(),
                ));
            }
            log::warn!("checkpoint config digest differs from the current configuration; loading anyway");
        }
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} parameters, model has {}", self.params.len(), store.len())));
        }
        for ((_, p), s) in store.iter().zip(&self.params) {
            if p.name != s.name || p.tensor.shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {} {:?} does not match stored {} {:?}", p.name, p.tensor.shape(), s.name, s.shape)));
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, s) in ids.into_iter().zip(&self.params) {
            store.tensor_mut(id).data_mut().iter_mut().zip(&s.values).for_each(|(d, &v)| *d = f64::from(v));
        }
        Ok(self.optimizer.as_ref().map(|o| {
            let mut state = OptimizerState::new(store);
            state.step = o.step;
            let to64 = |xs: &[Vec<f32>]| xs.iter().map(|x| x.iter().map(|&v| f64::from(v)).collect()).collect();
            state.m = to64(&o.m);
            state.v = to64(&o.v);
            state
        }))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {} of {}", self.pos, self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

/// Writes through a temporary file and renames, so readers never observe a
/// partial checkpoint.
pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, checkpoint.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
