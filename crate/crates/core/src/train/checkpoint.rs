//! Portable checkpoint format.
//!
//! ```text
//! "STGW1"
//! u32 entry count
//! per entry: u32 name length, UTF-8 name, u32 rank, rank × u32 dims, f64 data
//! u64 trailer length, JSON trailer (CheckpointMeta)
//! ```
//!
//! Every integer and float is little-endian.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::MinMaxScaler;
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"STGW1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub scaler: Option<MinMaxScaler>,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
    pub node_order: Vec<String>,
    /// The flat run configuration that produced this checkpoint.
    pub run_config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub meta: CheckpointMeta,
}

fn malformed(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| malformed(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let trailer = serde_json::to_vec(&self.meta).map_err(|e| malformed(format!("trailer: {e}")))?;
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(malformed("bad magic, not an STGW1 checkpoint"));
        }
        let count = c.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(len)?)
                .map_err(|_| malformed("parameter name is not UTF-8"))?
                .to_owned();
            let rank = c.u32()? as usize;
            let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.ok_or_else(|| malformed(format!("{name}: shape overflow")))?;
            let raw = c.take(numel.checked_mul(8).ok_or_else(|| malformed("size overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| malformed(format!("{name}: {e}")))?;
            params.push((name, t));
        }
        let trailer_len = c.u64()? as usize;
        if c.pos.checked_add(trailer_len) != Some(bytes.len()) {
            return Err(malformed(format!(
                "length mismatch: trailer says {trailer_len} bytes, {} remain",
                bytes.len() - c.pos
            )));
        }
        let meta = serde_json::from_slice(c.take(trailer_len)?).map_err(|e| malformed(format!("trailer: {e}")))?;
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()?).map_err(|source| TrainError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Where the scheduler keeps its best-so-far checkpoint.
pub trait CheckpointStore {
    fn save_best(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError>;
    fn load_best(&self) -> Result<Option<Checkpoint>, TrainError>;
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    best: Option<Checkpoint>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl CheckpointStore for MemoryStore {
    fn save_best(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        self.best = Some(ckpt.clone());
        Ok(())
    }

    fn load_best(&self) -> Result<Option<Checkpoint>, TrainError> {
        Ok(self.best.clone())
    }
}

/// Keeps the best checkpoint in one file, overwritten on improvement.
#[derive(Debug)]
pub struct FileStore {
    pub path: PathBuf,
}

impl FileStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }
}

impl CheckpointStore for FileStore {
    fn save_best(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        ckpt.save(&self.path)
    }

    fn load_best(&self) -> Result<Option<Checkpoint>, TrainError> {
        if self.path.exists() {
            Checkpoint::load(&self.path).map(Some)
        } else {
            Ok(None)
        }
    }
}
