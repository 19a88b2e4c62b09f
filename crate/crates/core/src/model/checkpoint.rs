//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "GAMMACKP"
//! version    u32       container version
//! header_len u64       byte length of the JSON header
//! header     JSON      {"schema_version", "config", "metadata", "tensors": [{name, shape, offset}]}
//! payload    f64 LE    tensors concatenated; `offset` counts f64 values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GAMMACKP";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Version of the serialized [`ModelConfig`] schema.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: ModelConfig,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.config, 0)?;
        model.load_params(self.params)?;
        Ok(model)
    }
}

pub fn encode_checkpoint(model: &Model, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (_, name, t) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        schema_version: CONFIG_SCHEMA_VERSION,
        config: model.config().clone(),
        metadata: metadata.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + 8 * offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported container version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..payload_start])?;
    if header.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported config schema version {}",
            header.schema_version
        )));
    }
    let payload = &bytes[payload_start..];
    if !payload.len().is_multiple_of(8) {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = ParamStore::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n;
        if end > values.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past the payload", entry.name)));
        }
        params.insert(entry.name, Tensor::new(entry.shape, values[entry.offset..end].to_vec()));
    }
    Ok(Checkpoint {
        config: header.config,
        metadata: header.metadata,
        params,
    })
}

pub fn save_checkpoint(model: &Model, metadata: &BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, metadata)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters_bitwise() {
        let model = Model::new(ModelConfig::micro(), 5).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), "3".to_string());
        let bytes = encode_checkpoint(&model, &meta).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.metadata, meta);
        assert_eq!(&ck.config, model.config());
        let restored = ck.into_model().unwrap();
        assert_eq!(restored.params(), model.params());
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::new(ModelConfig::micro(), 5).unwrap();
        let mut bytes = encode_checkpoint(&model, &BTreeMap::new()).unwrap();
        assert!(decode_checkpoint(&bytes[..10]).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(decode_checkpoint(&bytes).is_err());
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
