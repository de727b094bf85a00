//! Single-file checkpoints: a magic tag, a JSON header describing every
//! array, then the arrays as little-endian f32.
//!
//! ```text
//! b"AFANCKPT" | u64 LE header length | header JSON | f32 LE data...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AfanModel, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AFANCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    Param,
    Buffer,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub kind: ArrayKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub num_classes: usize,
    pub config_hash: String,
    /// Completed training steps.
    pub step: usize,
    pub model: ModelConfig,
    /// The canonical training configuration the hash was taken over.
    #[serde(default)]
    pub train_config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: usize,
    pub model: ModelConfig,
    pub train_config: serde_json::Value,
    pub store: ParamStore<f32>,
    pub momentum: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn num_classes(&self) -> usize {
        self.model.detector.num_classes
    }

    /// Builds the model and checks that every parameter it declares is
    /// present with the right shape.
    pub fn instantiate(&self) -> Result<AfanModel> {
        let model = AfanModel::new(self.model.clone())?;
        let reference = model.init_store(0);
        for (name, t) in reference.params() {
            match self.store.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::Version(format!(
                        "parameter {name} has shape {:?}, model expects {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Version(format!("checkpoint lacks parameter {name}"))),
            }
        }
        for name in reference.buffers().keys() {
            if self.store.buffer(name).is_none() {
                return Err(Error::Version(format!("checkpoint lacks buffer {name}")));
            }
        }
        Ok(model)
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut payload: Vec<&Tensor<f32>> = Vec::new();
    let groups: [(ArrayKind, &BTreeMap<String, Tensor<f32>>); 3] = [
        (ArrayKind::Param, ckpt.store.params()),
        (ArrayKind::Buffer, ckpt.store.buffers()),
        (ArrayKind::Momentum, &ckpt.momentum),
    ];
    for (kind, map) in groups {
        for (name, t) in map {
            arrays.push(ArrayEntry { name: name.clone(), kind, shape: t.shape().to_vec() });
            payload.push(t);
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        num_classes: ckpt.num_classes(),
        config_hash: ckpt.config_hash.clone(),
        step: ckpt.step,
        model: ckpt.model.clone(),
        train_config: ckpt.train_config.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = payload.iter().map(|t| t.numel()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in payload {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Version("not a checkpoint file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| Error::format(None, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.num_classes != header.model.detector.num_classes {
        return Err(Error::format(None, "header class count disagrees with the model description"));
    }
    let mut cursor = 16 + hlen;
    let mut store = ParamStore::default();
    let mut momentum = BTreeMap::new();
    for (i, entry) in header.arrays.iter().enumerate() {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(cursor..cursor + 4 * n)
            .ok_or_else(|| Error::format(Some(i), format!("array {} is truncated", entry.name)))?;
        cursor += 4 * n;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(&entry.shape, data);
        match entry.kind {
            ArrayKind::Param => store.insert(&entry.name, t),
            ArrayKind::Buffer => store.insert_buffer(&entry.name, t),
            ArrayKind::Momentum => {
                momentum.insert(entry.name.clone(), t);
            }
        }
    }
    if cursor != bytes.len() {
        return Err(Error::format(None, "trailing bytes after the last array"));
    }
    Ok(Checkpoint {
        config_hash: header.config_hash,
        step: header.step,
        model: header.model,
        train_config: header.train_config,
        store,
        momentum,
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
