//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"KRLMCKPT" u32 version
//! u64 len, manifest JSON
//! u32 count, then per parameter: str name, u8 trainable, tensor
//! u8 has_optimizer [u64 updates, u32 count, per entry: str name, tensor m, tensor v]
//! u32 count, then per extra: str key, u64 len, bytes
//! ```
//!
//! where `str` is `u32 len + UTF-8` and `tensor` is `u64 rows, u64 cols,
//! rows*cols f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::optim::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"KRLMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    /// Opaque named blobs (tokenizer vocabulary and the like).
    pub extras: BTreeMap<String, Vec<u8>>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let manifest = serde_json::to_vec(&self.manifest)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;

        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (_, p) in self.params.iter() {
            write_str(w, &p.name)?;
            w.write_all(&[p.trainable as u8])?;
            write_tensor(w, &p.tensor)?;
        }

        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(st) => {
                w.write_all(&[1])?;
                w.write_all(&st.updates.to_le_bytes())?;
                w.write_all(&(st.m.len() as u32).to_le_bytes())?;
                for (name, m) in &st.m {
                    let v = st.v.get(name).ok_or_else(|| {
                        NumericsError::Checkpoint(format!("second moment missing for {name}"))
                    })?;
                    write_str(w, name)?;
                    write_tensor(w, m)?;
                    write_tensor(w, v)?;
                }
            }
        }

        w.write_all(&(self.extras.len() as u32).to_le_bytes())?;
        for (k, bytes) in &self.extras {
            write_str(w, k)?;
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NumericsError::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(NumericsError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = read_u64(r)? as usize;
        let manifest: Manifest = serde_json::from_slice(&read_bytes(r, len)?)?;

        let mut params = ParamStore::new();
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let trainable = read_u8(r)? != 0;
            let tensor = read_tensor(r)?;
            params.add(name, tensor, trainable)?;
        }

        let optimizer = match read_u8(r)? {
            0 => None,
            1 => {
                let mut st = OptimizerState {
                    updates: read_u64(r)?,
                    ..OptimizerState::default()
                };
                for _ in 0..read_u32(r)? {
                    let name = read_str(r)?;
                    st.m.insert(name.clone(), read_tensor(r)?);
                    st.v.insert(name, read_tensor(r)?);
                }
                Some(st)
            }
            b => return Err(NumericsError::Checkpoint(format!("bad optimizer flag {b}"))),
        };

        let mut extras = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let key = read_str(r)?;
            let len = read_u64(r)? as usize;
            extras.insert(key, read_bytes(r, len)?);
        }
        Ok(Self {
            manifest,
            params,
            optimizer,
            extras,
        })
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor<f64>) -> Result<()> {
    w.write_all(&(t.rows() as u64).to_le_bytes())?;
    w.write_all(&(t.cols() as u64).to_le_bytes())?;
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    r.take(len as u64).read_to_end(&mut out)?;
    if out.len() != len {
        return Err(NumericsError::Checkpoint("truncated checkpoint".into()));
    }
    Ok(out)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    String::from_utf8(read_bytes(r, len)?)
        .map_err(|_| NumericsError::Checkpoint("name is not UTF-8".into()))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| NumericsError::Checkpoint("tensor size overflow".into()))?;
    let bytes = read_bytes(r, n * 8)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::from_vec(rows, cols, data)
}
