//! Binary checkpoint:
//!
//! ```text
//! "LFKT" | version u16 LE | blob length u32 LE | blob (JSON) |
//! weight count u64 LE | weights f32 LE | CRC32 (IEEE) of all preceding bytes, u32 LE
//! ```
//!
//! The blob holds the model spec and training metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainingConfig};
use crate::error::{LeafError, Result};
use crate::layers::{Model, ModelSpec};

pub const MAGIC: &[u8; 4] = b"LFKT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainingConfig,
    /// 1-based epoch the weights come from; 0 for an untrained model.
    pub epoch: usize,
    pub metrics: Option<EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Blob {
    spec: ModelSpec,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub meta: CheckpointMeta,
    pub weights: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        Self { spec: model.spec().clone(), meta, weights: model.flat_weights() }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_weights(self.spec.clone(), &self.weights)
    }

    /// Equality with weights compared by bit pattern.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.meta == other.meta
            && self.weights.len() == other.weights.len()
            && self.weights.iter().zip(&other.weights).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = serde_json::to_vec(&Blob { spec: self.spec.clone(), meta: self.meta.clone() })?;
        let blob_len = u32::try_from(blob.len())
            .map_err(|_| LeafError::Config(format!("checkpoint metadata of {} bytes is too large", blob.len())))?;
        let mut out = Vec::with_capacity(4 + 2 + 4 + blob.len() + 8 + 4 * self.weights.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&blob_len.to_le_bytes());
        out.extend_from_slice(&blob);
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(LeafError::format(0, "bad magic, not a leafkit checkpoint"));
        }
        let version = u16::from_le_bytes(r.array("format version")?);
        if version != FORMAT_VERSION {
            return Err(LeafError::format(4, format!("unsupported format version {version}")));
        }
        let blob_len = u32::from_le_bytes(r.array("metadata length")?) as usize;
        let blob_at = r.pos as u64;
        let blob: Blob = serde_json::from_slice(r.take(blob_len, "metadata")?)
            .map_err(|e| LeafError::format(blob_at, format!("metadata is not valid: {e}")))?;
        let count_at = r.pos as u64;
        let count = u64::from_le_bytes(r.array("weight count")?);
        let expected = blob.spec.param_count() as u64;
        if count != expected {
            return Err(LeafError::format(count_at, format!("{count} weights but the spec needs {expected}")));
        }
        let raw = r.take(count as usize * 4, "weights")?;
        let weights = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect();
        let crc_at = r.pos;
        let stored = u32::from_le_bytes(r.array("checksum")?);
        if r.pos != bytes.len() {
            return Err(LeafError::format(r.pos as u64, "trailing bytes after checksum"));
        }
        let actual = crc32fast::hash(&bytes[..crc_at]);
        if stored != actual {
            return Err(LeafError::format(
                crc_at as u64,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        let ckpt = Checkpoint { spec: blob.spec, meta: blob.meta, weights };
        ckpt.spec.validate().map_err(|e| LeafError::format(blob_at, format!("invalid model spec: {e}")))?;
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            LeafError::format(self.bytes.len() as u64, format!("truncated while reading {what}"))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

/// Writes atomically through a temporary file in the same directory.
pub fn save_model(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LeafError::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| LeafError::io(&tmp, e))?;
    f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| LeafError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LeafError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| LeafError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
