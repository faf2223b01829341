//! Weight file layout:
//!
//! ```text
//! b"DWW1" | u64 LE header length | JSON header | f32 LE payload
//! ```
//!
//! The header is `{"tensors": [{"name", "shape", "offset"}], "config": ...}`
//! with `offset` counted in elements from the start of the payload. Values are
//! rounded to 32 bits on save.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutogradError, Tensor};

const MAGIC: &[u8; 4] = b"DWW1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<(String, Tensor)>,
    pub config: serde_json::Value,
}

fn err(path: &Path, message: impl ToString) -> AutogradError {
    AutogradError::WeightFile { path: path.display().to_string(), message: message.to_string() }
}

pub fn save_weights(path: &Path, wf: &WeightFile) -> Result<(), AutogradError> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(wf.tensors.len());
    for (name, t) in &wf.tensors {
        entries.push(Entry { name: name.clone(), shape: t.shape(), offset });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header { tensors: entries, config: wf.config.clone() }).map_err(|e| err(path, e))?;
    let mut bytes = Vec::with_capacity(12 + header.len() + 4 * offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, t) in &wf.tensors {
        for v in t.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| err(path, e))
}

pub fn load_weights(path: &Path) -> Result<WeightFile, AutogradError> {
    let bytes = fs::read(path).map_err(|e| err(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(err(path, "not a weight file"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let payload_start = 12usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| err(path, e))?;
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let (lo, hi) = (4 * e.offset, 4 * (e.offset + n));
        if hi > payload.len() {
            return Err(err(path, format!("tensor {} runs past the payload", e.name)));
        }
        let data: Vec<f64> = payload[lo..hi].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(err(path, format!("tensor {} holds non-finite values", e.name)));
        }
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(WeightFile { tensors, config: header.config })
}
