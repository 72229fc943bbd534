//! Named parameter storage and the checkpoint container.
//!
//! A checkpoint is a single file:
//!
//! ```text
//! b"MMFEATCK"                8-byte magic
//! u32 LE                     format version
//! u64 LE                     header length in bytes
//! header                     UTF-8 JSON (see `CheckpointHeader`)
//! f32 LE payload             every entry's values, in header order
//! ```
//!
//! Entry names follow `adapter/<modality>/...`, `encoder/...` and
//! `detector/...`. Normalization running statistics sit next to their layer
//! (`.../running_mean`, `.../running_var`). Optimizer moments are stored as
//! `optim/m/<param>` and `optim/v/<param>`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMFEATCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trainable parameters and non-trainable buffers, keyed by name. Iteration
/// order is the lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn buffer(&self, name: &str) -> &Tensor<T> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("missing buffer `{name}`"))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Place every parameter on `g`, trainable or constant.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Graph handles of a registered [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EntryInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: String,
    /// Free-form JSON describing how the parameters were produced (model
    /// and training configuration, step counter).
    pub meta: serde_json::Value,
    pub entries: Vec<EntryInfo>,
}

/// Everything stored in a checkpoint file: named f32 tensors and a header.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub entries: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, t)| EntryInfo {
                    name: k.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        let mut buf = Vec::with_capacity(json.len() + 32 + 4 * self.entries.values().map(|t| t.numel()).sum::<usize>());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in self.entries.values() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        if buf.len() < 20 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        let body = buf.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut off = 20 + hlen;
        let mut entries = BTreeMap::new();
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            let bytes = buf.get(off..off + 4 * n).ok_or_else(|| bad("truncated payload"))?;
            let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            entries.insert(e.name.clone(), Tensor::from_vec(&e.shape, data));
            off += 4 * n;
        }
        if off != buf.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            config_hash: header.config_hash,
            meta: header.meta,
            entries,
        })
    }
}
