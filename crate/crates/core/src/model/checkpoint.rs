//! Checkpoint container.
//!
//! ```text
//! "USQCKPT1" | header length (u64 LE) | JSON header | tensor data (f32 LE)
//! ```
//!
//! The header holds the model config and `(name, shape, offset)` for every
//! tensor, with offsets relative to the start of the data segment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

use super::config::ModelConfig;
use super::params::ModelParams;

const MAGIC: &[u8; 8] = b"USQCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Serializes parameters, rounding every value to f32.
pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(params.tensors.len());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        entries.push(TensorEntry { name: name.clone(), shape: [t.rows, t.cols], offset });
        offset += t.len() * 4;
    }
    let header = serde_json::to_vec(&Header { config: params.config.clone(), tensors: entries })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &params.tensors {
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |m: &str| Error::CheckpointFormat(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];

    let (layout, shapes) = ModelParams::expected_shapes(&header.config)?;
    if shapes.len() != header.tensors.len() {
        return Err(bad(&format!("expected {} tensors, found {}", shapes.len(), header.tensors.len())));
    }
    let mut names = Vec::with_capacity(shapes.len());
    let mut tensors = Vec::with_capacity(shapes.len());
    for ((name, rows, cols), e) in shapes.into_iter().zip(&header.tensors) {
        if e.name != name || e.shape != [rows, cols] {
            return Err(bad(&format!("tensor `{}` {:?} does not match expected `{name}` [{rows}, {cols}]", e.name, e.shape)));
        }
        let end = e.offset + rows * cols * 4;
        let raw = data.get(e.offset..end).ok_or_else(|| bad(&format!("tensor `{name}` runs past end of file")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        names.push(name);
        tensors.push(Mat::from_vec(rows, cols, values));
    }
    Ok(ModelParams { config: header.config, layout, names, tensors })
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    from_bytes(&fs::read(path)?)
}

/// Rounds every parameter to f32 precision in place, so in-memory values match
/// what a checkpoint stores.
pub fn round_to_f32(params: &mut ModelParams) {
    for t in &mut params.tensors {
        for v in &mut t.data {
            *v = *v as f32 as f64;
        }
    }
}
