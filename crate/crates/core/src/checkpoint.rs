//! Binary checkpoint format.
//!
//! ```text
//! "FGPT" | u32 version (LE) | u64 metadata length (LE) | metadata (UTF-8 JSON)
//! | raw little-endian row-major parameter payloads in manifest order
//! ```
//!
//! The metadata carries the model config, per-block fusion annotations and
//! an ordered manifest of every tensor (name, shape, dtype, byte offset
//! relative to the start of the payload).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Injection, LoraAdapter, COEFF_INIT};
use crate::gpt::{GptConfig, GptModel, LinearRole, TransformerBlock};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"FGPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotMeta {
    pub role: LinearRole,
    pub fusion_count: usize,
    /// Rank of each injection's coefficient factors, in injection order.
    pub ranks: Vec<usize>,
    pub lora_rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub origin: usize,
    pub fusion_count: usize,
    pub slots: Vec<SlotMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub dtype: String,
    pub config: GptConfig,
    pub coefficient_init: String,
    pub blocks: Vec<BlockMeta>,
    pub params: Vec<ParamEntry>,
}

fn metadata<T: Float>(model: &GptModel<T>) -> Metadata {
    let blocks = model
        .blocks
        .iter()
        .map(|b| BlockMeta {
            origin: b.origin,
            fusion_count: b.fusion_count(),
            slots: LinearRole::ALL
                .iter()
                .map(|&role| {
                    let lin = b.linear(role);
                    SlotMeta {
                        role,
                        fusion_count: lin.fusion_count(),
                        ranks: lin.injections.iter().map(Injection::rank).collect(),
                        lora_rank: lin.adapter.as_ref().map(LoraAdapter::rank),
                    }
                })
                .collect(),
        })
        .collect();
    let mut params = Vec::new();
    let mut offset = 0u64;
    model.visit(&mut |name, t| {
        params.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
        });
        offset += (t.numel() * T::BYTES) as u64;
    });
    Metadata {
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        coefficient_init: COEFF_INIT.to_string(),
        blocks,
        params,
    }
}

pub fn to_bytes<T: Float>(model: &GptModel<T>) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&metadata(model))?;
    let mut out = Vec::with_capacity(HEADER_LEN as usize + meta.len() + model.parameter_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    model.visit(&mut |_, t| {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    });
    Ok(out)
}

pub fn save_checkpoint<T: Float>(model: &GptModel<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<GptModel<T>> {
    from_bytes(&std::fs::read(path)?)
}

/// Reads only the header and metadata.
pub fn read_metadata(bytes: &[u8]) -> Result<Metadata> {
    Ok(parse_header(bytes)?.0)
}

fn truncated(offset: u64, what: &str) -> Error {
    Error::Checkpoint {
        offset,
        message: format!("file truncated while reading {what}"),
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Metadata, u64)> {
    if bytes.len() < 4 {
        return Err(truncated(0, "magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Version(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            "FGPT"
        )));
    }
    if bytes.len() < HEADER_LEN as usize {
        return Err(truncated(4, "header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version(format!("unsupported version {version}, expected {VERSION}")));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let meta_end = HEADER_LEN.checked_add(meta_len).filter(|&e| e <= bytes.len() as u64);
    let Some(meta_end) = meta_end else {
        return Err(truncated(HEADER_LEN, "metadata"));
    };
    let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN as usize..meta_end as usize]).map_err(|e| {
        Error::Checkpoint {
            offset: HEADER_LEN,
            message: format!("invalid metadata: {e}"),
        }
    })?;
    Ok((meta, meta_end))
}

/// Builds an all-zero model whose tensor layout matches the metadata.
fn skeleton<T: Float>(meta: &Metadata) -> Result<GptModel<T>> {
    let mut model = GptModel::<T>::init(meta.config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = &meta.config;
    model.blocks = meta
        .blocks
        .iter()
        .map(|bm| {
            let mut block = TransformerBlock::<T>::init(cfg, bm.origin, &mut rng);
            if bm.slots.len() != LinearRole::ALL.len() {
                return Err(Error::Checkpoint {
                    offset: HEADER_LEN,
                    message: format!("block {} lists {} slots, expected 6", bm.origin, bm.slots.len()),
                });
            }
            for slot in &bm.slots {
                let [d, k] = slot.role.shape(cfg);
                let lin = block.linear_mut(slot.role);
                if slot.ranks.len() != slot.fusion_count || slot.fusion_count != bm.fusion_count {
                    return Err(Error::Checkpoint {
                        offset: HEADER_LEN,
                        message: format!("inconsistent fusion annotations on block {}", bm.origin),
                    });
                }
                for &r in &slot.ranks {
                    lin.injections.push(Injection {
                        source: Tensor::zeros(vec![d, k]),
                        c_left: Tensor::zeros(vec![d, r.max(1)]),
                        c_right: Tensor::zeros(vec![r.max(1), k]),
                    });
                }
                if let Some(r) = slot.lora_rank {
                    lin.adapter = Some(LoraAdapter {
                        a: Tensor::zeros(vec![d, r.max(1)]),
                        b: Tensor::zeros(vec![r.max(1), k]),
                    });
                }
            }
            Ok(block)
        })
        .collect::<Result<_>>()?;
    Ok(model)
}

pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<GptModel<T>> {
    let (meta, payload_start) = parse_header(bytes)?;
    if meta.dtype != T::DTYPE {
        return Err(Error::Checkpoint {
            offset: HEADER_LEN,
            message: format!("checkpoint holds {} tensors, requested {}", meta.dtype, T::DTYPE),
        });
    }
    let mut model = skeleton::<T>(&meta)?;
    let mut entries = meta.params.iter();
    let mut failure: Option<Error> = None;
    let mut expected_offset = 0u64;
    model.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = entries.next() else {
            failure = Some(Error::Checkpoint {
                offset: HEADER_LEN,
                message: format!("manifest is missing tensor {name}"),
            });
            return;
        };
        let at = payload_start + entry.offset;
        if entry.name != name || entry.shape != t.shape() || entry.dtype != T::DTYPE || entry.offset != expected_offset {
            failure = Some(Error::Checkpoint {
                offset: at,
                message: format!(
                    "manifest entry {} {:?} does not match expected tensor {name} {:?} at payload offset {expected_offset}",
                    entry.name,
                    entry.shape,
                    t.shape()
                ),
            });
            return;
        }
        let len = (t.numel() * T::BYTES) as u64;
        let end = at + len;
        if end > bytes.len() as u64 {
            failure = Some(truncated(at, &name));
            return;
        }
        let raw = &bytes[at as usize..end as usize];
        for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(T::BYTES)) {
            *v = T::read_le(chunk);
        }
        expected_offset += len;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = entries.next() {
        return Err(Error::Checkpoint {
            offset: payload_start + extra.offset,
            message: format!("manifest lists unexpected tensor {}", extra.name),
        });
    }
    let end = payload_start + expected_offset;
    if end != bytes.len() as u64 {
        return Err(Error::Checkpoint {
            offset: end,
            message: format!("{} trailing bytes after payload", bytes.len() as u64 - end),
        });
    }
    Ok(model)
}
