//! Parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "EWIRCKPT"
//! version   u32      currently 1
//! length    u32      byte length of the manifest
//! manifest  JSON     {"version":1,"meta":{..},"tensors":[{"name","shape","offset","trainable"}]}
//! data      f32 LE   tensors back to back; `offset` is relative to the start of data
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EWIRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(store: &ParamStore<f32>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut data = Vec::new();
    for (name, p) in store.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            offset: data.len() as u64,
            trainable: p.trainable,
        });
        for v in p.value.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: VERSION,
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore<f32>, Manifest)> {
    let fail = |offset: usize, reason: &str| Error::Format {
        offset: offset as u64,
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail(0, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(8, &format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let data_start = 16 + len;
    if bytes.len() < data_start {
        return Err(fail(16, "truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| fail(16, &format!("manifest: {e}")))?;
    let data = &bytes[data_start..];
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let numel: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 4 * numel;
        if end > data.len() {
            return Err(fail(data_start + start, &format!("tensor `{}` runs past end of file", t.name)));
        }
        let values = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(t.shape.clone(), values).map_err(|e| fail(data_start + start, &e.to_string()))?;
        store.insert(t.name.clone(), value, t.trainable);
    }
    Ok((store, manifest))
}

pub fn save(path: &Path, store: &ParamStore<f32>, meta: &BTreeMap<String, String>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(store, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore<f32>, Manifest)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::spec::LayerSpec;
    use crate::rng;

    #[test]
    fn roundtrip_preserves_values_and_flags() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, &[rng::INIT]);
        store.init_layer("a", &LayerSpec::conv(2, 4, 3, 1, 1, true), &mut r);
        store.init_layer("b", &LayerSpec::BatchNorm { ch: 4 }, &mut r);
        let mut meta = BTreeMap::new();
        meta.insert("role".into(), "front".into());
        let bytes = to_bytes(&store, &meta);
        let (back, manifest) = from_bytes(&bytes).unwrap();
        assert_eq!(manifest.meta, meta);
        assert_eq!(back.len(), store.len());
        for ((na, pa), (nb, pb)) in store.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value, pb.value);
            assert_eq!(pa.trainable, pb.trainable);
        }
        assert_eq!(to_bytes(&back, &meta), bytes);
    }

    #[test]
    fn truncation_detected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(vec![8], 1.0f32), true);
        let bytes = to_bytes(&store, &BTreeMap::new());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"garbage").is_err());
    }
}
