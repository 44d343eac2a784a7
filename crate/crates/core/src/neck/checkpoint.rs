//! Neck checkpoint files.
//!
//! ```text
//! magic    8 bytes   b"FPNECK\0\0"
//! version  u32 LE    1
//! hdr_len  u32 LE    length of the JSON header
//! header   hdr_len   {"config": NeckConfig, "params": [{"name", "shape"}]}
//! payload  f64 LE    every parameter, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Neck, NeckConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::featio::write_new_file;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FPNECK\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: NeckConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(neck: &Neck) -> Result<Vec<u8>> {
    let header = Header {
        config: neck.config().clone(),
        params: neck
            .params()
            .names()
            .iter()
            .zip(neck.params().tensors())
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * neck.params().scalar_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in neck.params().tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Neck> {
    let fmt = |field: &str, message: String| Error::Format {
        field: field.to_string(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fmt("magic", "not a neck checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fmt("version", format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(fmt("header", "truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| fmt("header", e.to_string()))?;
    let payload = &body[hlen..];
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(fmt(
            "payload",
            format!("expected {} bytes, found {}", total * 8, payload.len()),
        ));
    }
    let mut store = ParamStore::new();
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for entry in header.params {
        let len = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(len).collect();
        store.push(entry.name, Tensor::new(entry.shape, data)?);
    }
    Neck::from_parts(header.config, store)
}

/// Writes a checkpoint; refuses to replace an existing file unless `overwrite`.
pub fn save_checkpoint(neck: &Neck, path: &Path, overwrite: bool) -> Result<()> {
    let bytes = encode_checkpoint(neck)?;
    write_new_file(path, &bytes, overwrite)
}

pub fn load_checkpoint(path: &Path) -> Result<Neck> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
