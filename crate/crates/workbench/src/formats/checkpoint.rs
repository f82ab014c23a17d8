// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight checkpoints.
//!
//! Layout: the 8-byte magic `CTWGHT01`, a little-endian `u64` header length,
//! a JSON header (model config, tensor table, free-form metadata), then
//! every tensor as raw little-endian `f64` in table order. Values round-trip
//! bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crosstrace_core::model::{ModelConfig, Weights};

use crate::error::{IoContext, WbError, WbResult};

pub const MAGIC: &[u8; 8] = b"CTWGHT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub patch_grid: [usize; 2],
    pub cell_features: usize,
    pub max_seq: usize,
    pub ln_eps: f64,
    pub tied_head: bool,
}

impl From<&ModelConfig> for ModelHeader {
    fn from(c: &ModelConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            patch_grid: [c.patch_grid.0, c.patch_grid.1],
            cell_features: c.cell_features,
            max_seq: c.max_seq,
            ln_eps: c.ln_eps,
            tied_head: c.tied_head,
        }
    }
}

impl From<&ModelHeader> for ModelConfig {
    fn from(h: &ModelHeader) -> Self {
        ModelConfig {
            n_layers: h.n_layers,
            d_model: h.d_model,
            n_heads: h.n_heads,
            d_ff: h.d_ff,
            vocab_size: h.vocab_size,
            patch_grid: (h.patch_grid[0], h.patch_grid[1]),
            cell_features: h.cell_features,
            max_seq: h.max_seq,
            ln_eps: h.ln_eps,
            tied_head: h.tied_head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelHeader,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode(config: &ModelConfig, weights: &Weights, metadata: serde_json::Value) -> Vec<u8> {
    let tensors = weights.tensors();
    let header = Header {
        format_version: 1,
        model: config.into(),
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = tensors.iter().map(|(_, m)| m.data().len() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> WbResult<(ModelConfig, Weights, Header)> {
    let bad = |d: &str| WbError::format(path, format!("checkpoint: {d}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.format_version != 1 {
        return Err(bad(&format!("unsupported version {}", header.format_version)));
    }
    let config = ModelConfig::from(&header.model);
    config.validate()?;
    let mut weights = Weights::zeros(&config);
    let mut off = 16 + hlen;
    {
        let mut slots = weights.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad("tensor count does not match the model"));
        }
        for ((name, m), e) in slots.iter_mut().zip(&header.tensors) {
            if *name != e.name || m.rows() != e.rows || m.cols() != e.cols {
                return Err(bad(&format!("tensor {} does not match {name}", e.name)));
            }
            let n = e.rows * e.cols * 8;
            let raw = bytes.get(off..off + n).ok_or_else(|| bad("truncated payload"))?;
            for (dst, chunk) in m.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            off += n;
        }
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((config, weights, header))
}

pub fn save(path: &Path, config: &ModelConfig, weights: &Weights, metadata: serde_json::Value) -> WbResult<String> {
    let bytes = encode(config, weights, metadata);
    std::fs::write(path, &bytes).at(path)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> WbResult<(ModelConfig, Weights, Header)> {
    let bytes = std::fs::read(path).at(path)?;
    decode(&bytes, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> WbResult<String> {
    Ok(sha256_hex(&std::fs::read(path).at(path)?))
}
