//! Checkpoint files: `u64` little-endian manifest length, JSON manifest,
//! then each tensor's little-endian data at a 64-byte aligned offset
//! (offsets are relative to the first aligned byte after the manifest).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Lineage, Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::io::{atomic_write, sha256_hex};
use crate::tensor::{DType, Float, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    lineage: Lineage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl<T: Float> Model<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0usize;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let nbytes = t.numel() * T::DTYPE.size();
                let e = TensorEntry {
                    name: name.to_string(),
                    dtype: T::DTYPE,
                    shape: t.shape().to_vec(),
                    offset: offset as u64,
                    nbytes: nbytes as u64,
                };
                offset = align_up(offset + nbytes);
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            lineage: self.lineage.clone(),
            provenance: self.provenance.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(align_up(8 + json.len()) + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(align_up(out.len()), 0);
        let base = out.len();
        for ((_, t), e) in self.params.iter().zip(&manifest.tensors) {
            out.resize(base + e.offset as usize, 0);
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out.resize(align_up(out.len()), 0);
        Ok(out)
    }

    /// Parses a checkpoint, converting stored values to `T` if needed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated manifest"))?;
        let m: Manifest = serde_json::from_slice(json)?;
        if m.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", m.format_version)));
        }
        let base = align_up(8 + len);
        let mut entries = Vec::with_capacity(m.tensors.len());
        for e in &m.tensors {
            let n: usize = e.shape.iter().product();
            let size = e.dtype.size();
            if e.nbytes as usize != n * size {
                return Err(bad(&format!("tensor {} size disagrees with shape", e.name)));
            }
            let start = base + e.offset as usize;
            let raw = bytes
                .get(start..start + e.nbytes as usize)
                .ok_or_else(|| bad(&format!("tensor {} out of bounds", e.name)))?;
            let data: Vec<T> = match e.dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
            };
            entries.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        let model = Model {
            config: m.config,
            params: Params::new(entries)?,
            lineage: m.lineage,
            provenance: m.provenance,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}
