//! Binary checkpoint container: named f32 tensors plus a JSON metadata blob.
//!
//! Layout (little endian):
//! `"PMCK"`, u32 version, u64 metadata length, metadata JSON, u32 tensor count,
//! then per tensor: u32 name length, name, u8 dtype, u32 rank, u64 dims, data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{DiffError, Result};

const MAGIC: &[u8; 4] = b"PMCK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const MAX_RANK: u32 = 8;

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const OPT_M: &str = "optim/m/";
const OPT_V: &str = "optim/v/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_bytes(r: &mut impl Read, n: u64, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let got = r.take(n).read_to_end(&mut buf)?;
    if got as u64 != n {
        return Err(DiffError::Format(format!("truncated {what}")));
    }
    Ok(buf)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut raw = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                raw.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&raw)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<4>(r)? != MAGIC {
            return Err(DiffError::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(DiffError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = read_u64(r)?;
        let meta: serde_json::Value = serde_json::from_slice(&read_bytes(r, meta_len, "metadata")?)?;
        let count = read_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)?;
            let name = String::from_utf8(read_bytes(r, name_len as u64, "tensor name")?)
                .map_err(|_| DiffError::Format("tensor name is not UTF-8".into()))?;
            let [dtype] = read_exact::<1>(r)?;
            if dtype != DTYPE_F32 {
                return Err(DiffError::Format(format!("{name}: unknown dtype {dtype}")));
            }
            let rank = read_u32(r)?;
            if rank > MAX_RANK {
                return Err(DiffError::Format(format!("{name}: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut n: u64 = 1;
            for _ in 0..rank {
                let d = read_u64(r)?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| DiffError::Format(format!("{name}: size overflow")))?;
                shape.push(d as usize);
            }
            let bytes = n
                .checked_mul(4)
                .ok_or_else(|| DiffError::Format(format!("{name}: size overflow")))?;
            let raw = read_bytes(r, bytes, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Pack parameters, buffers and (optionally) optimizer state.
    pub fn from_state(
        meta: serde_json::Value,
        params: &ParamStore,
        optim: Option<&AdamW>,
    ) -> Result<Self> {
        let mut meta = meta;
        let mut tensors = BTreeMap::new();
        for (k, t) in params.params() {
            tensors.insert(format!("{PARAM}{k}"), t.clone());
        }
        for (k, t) in params.buffers() {
            tensors.insert(format!("{BUFFER}{k}"), t.clone());
        }
        if let Some(opt) = optim {
            for (k, t) in &opt.m {
                tensors.insert(format!("{OPT_M}{k}"), t.clone());
            }
            for (k, t) in &opt.v {
                tensors.insert(format!("{OPT_V}{k}"), t.clone());
            }
            let obj = meta
                .as_object_mut()
                .ok_or_else(|| DiffError::Invalid("checkpoint metadata must be an object".into()))?;
            obj.insert(
                "optimizer".into(),
                serde_json::json!({
                    "config": opt.config,
                    "step": opt.step,
                    "counts": opt.counts,
                }),
            );
        }
        Ok(Self { meta, tensors })
    }

    pub fn params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (k, t) in &self.tensors {
            if let Some(name) = k.strip_prefix(PARAM) {
                store.insert(name, t.clone());
            } else if let Some(name) = k.strip_prefix(BUFFER) {
                store.insert_buffer(name, t.clone());
            }
        }
        store
    }

    /// Optimizer state, if the checkpoint carries one.
    pub fn optimizer(&self) -> Result<Option<AdamW>> {
        let Some(o) = self.meta.get("optimizer") else {
            return Ok(None);
        };
        let config: AdamWConfig = serde_json::from_value(o["config"].clone())?;
        let mut opt = AdamW::new(config);
        opt.step = serde_json::from_value(o["step"].clone())?;
        opt.counts = serde_json::from_value(o["counts"].clone())?;
        for (k, t) in &self.tensors {
            if let Some(name) = k.strip_prefix(OPT_M) {
                opt.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(OPT_V) {
                opt.v.insert(name.to_string(), t.clone());
            }
        }
        Ok(Some(opt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00";
        assert!(matches!(
            Checkpoint::read_from(&mut bytes.as_slice()),
            Err(DiffError::Format(_))
        ));
    }

    #[test]
    fn rejects_truncated_tensor() {
        let mut ck = Checkpoint {
            meta: serde_json::json!({}),
            ..Default::default()
        };
        ck.tensors.insert("a".into(), Tensor::ones(&[4, 4]));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
