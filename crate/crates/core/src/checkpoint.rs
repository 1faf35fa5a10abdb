//! Parameter archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "GCASCKPT"
//! length    u64      byte length of the manifest
//! manifest  JSON     {"format": 1, "kind", "config", "meta", "tensors": [...]}
//! data      raw f32  concatenated tensor payloads
//! ```
//!
//! Each tensor record carries `name`, `dtype` (always `"f32"`), `shape`,
//! `frozen`, and the `offset`/`length` of its payload in bytes relative to
//! the start of the data section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GCASCKPT";
pub const FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    frozen: bool,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    kind: String,
    config: serde_json::Value,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))
    }
}

pub fn encode(kind: &str, config: &impl Serialize, meta: &BTreeMap<String, serde_json::Value>, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let offset = data.len() as u64;
        for v in p.value.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorRecord {
            name: p.name.clone(),
            dtype: "f32".into(),
            shape: p.value.shape().to_vec(),
            frozen: p.group == Group::Base,
            offset,
            length: data.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT,
        kind: kind.into(),
        config: serde_json::to_value(config).map_err(|e| Error::Internal(e.to_string()))?,
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let corrupt = |m: String| Error::Corrupt {
        path: path.to_path_buf(),
        message: m,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| corrupt("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(corrupt(format!("unsupported format {}", manifest.format)));
    }
    let data = &bytes[16 + len..];
    let mut params = ParamStore::new();
    for r in &manifest.tensors {
        if r.dtype != "f32" {
            return Err(corrupt(format!("{}: unsupported dtype {}", r.name, r.dtype)));
        }
        let n: usize = r.shape.iter().product();
        let (start, end) = (r.offset as usize, (r.offset + r.length) as usize);
        if r.length as usize != 4 * n || end > data.len() || start > end {
            return Err(corrupt(format!("{}: payload out of bounds", r.name)));
        }
        if params.id(&r.name).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", r.name)));
        }
        let values = data[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let group = if r.frozen { Group::Base } else { Group::Adapter };
        params.add(r.name.clone(), group, Tensor::new(&r.shape, values));
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        config: manifest.config,
        meta: manifest.meta,
        params,
    })
}

pub fn save(path: &Path, kind: &str, config: &impl Serialize, meta: &BTreeMap<String, serde_json::Value>, store: &ParamStore<f32>) -> Result<()> {
    let bytes = encode(kind, config, meta, store)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Load a checkpoint and require its `kind`.
pub fn load_kind(path: &Path, kind: &str) -> Result<Checkpoint> {
    let c = load(path)?;
    ensure!(c.kind == kind, Config, "{} holds a {} checkpoint, expected {kind}", path.display(), c.kind);
    Ok(c)
}
