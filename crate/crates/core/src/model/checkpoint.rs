//! Checkpoint file format.
//!
//! ```text
//! b"RLNS1"                      magic
//! u64 LE                        header length in bytes
//! header                        UTF-8 JSON: config + tensor manifest
//! zero padding                  up to the next multiple of 8 bytes
//! payload                       little-endian f64, tensors back to back
//! ```
//!
//! Manifest offsets are byte offsets from the start of the payload.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"RLNS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn header_for(params: &ModelParams) -> CheckpointHeader {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    params.visit(&mut |name, _, t| {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += 8 * t.len() as u64;
    });
    CheckpointHeader { config: params.config, tensors }
}

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&header_for(params))?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    while out.len() % 8 != 0 {
        out.push(0);
    }
    params.visit(&mut |_, _, t| {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing RLNS1 magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[5..13]);
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 13usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[13..header_end])
        .map_err(|e| bad(format!("header is not valid JSON: {e}")))?;
    let payload_start = header_end.div_ceil(8) * 8;
    let payload = bytes.get(payload_start..).unwrap_or(&[]);

    header.config.validate().map_err(|e| bad(format!("config: {e}")))?;
    let mut params = ModelParams::zeros(header.config);
    let expected = header_for(&params);
    if expected.tensors.len() != header.tensors.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.tensors.len()
        )));
    }
    let mut prev_end = 0u64;
    for (want, got) in expected.tensors.iter().zip(&header.tensors) {
        if want.name != got.name || want.shape != got.shape {
            return Err(bad(format!(
                "manifest entry {} {:?} does not match expected {} {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
        if got.offset < prev_end {
            return Err(bad(format!("tensor {} overlaps its predecessor", got.name)));
        }
        prev_end = got.offset + 8 * got.shape.iter().product::<usize>() as u64;
    }
    if (payload.len() as u64) < prev_end {
        return Err(bad(format!(
            "payload truncated: {} bytes, manifest needs {prev_end}",
            payload.len()
        )));
    }

    let mut idx = 0;
    let mut failure = None;
    params.visit_mut(&mut |name, _, t| {
        let start = header.tensors[idx].offset as usize;
        idx += 1;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&payload[start + 8 * i..start + 8 * i + 8]);
            *v = f64::from_le_bytes(b);
        }
        if failure.is_none() && !t.all_finite() {
            failure = Some(name.to_string());
        }
    });
    if let Some(name) = failure {
        return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
    }
    Ok(params)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&bytes)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_bytes(&fs::read(path)?)
}
