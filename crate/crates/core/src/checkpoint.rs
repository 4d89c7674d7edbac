//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "CLPERASE"
//! version    u32
//! header     u64 length + JSON {arch, tensors: [{name, shape}]}
//! payload    f32 values of every tensor, in header order
//! history    u64 length + line-oriented run history
//! digest     32 bytes  SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::RunHistory;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{ArchConfig, DualEncoderModel, Params};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CLPERASE";
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(model: &DualEncoderModel, history: &RunHistory) -> Result<Vec<u8>> {
    let params = model.params();
    let header = Header {
        arch: model.arch().clone(),
        tensors: Params::NAMES
            .iter()
            .zip(params.shapes())
            .map(|(name, shape)| TensorEntry {
                name: name.to_string(),
                shape,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Corrupt(e.to_string()))?;
    let history = history.to_lines();

    let mut out = Vec::with_capacity(64 + header.len() + 4 * params.len() + history.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for slice in params.slices() {
        for &v in slice {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(history.len() as u64).to_le_bytes());
    out.extend_from_slice(history.as_bytes());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated while reading {what} at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Corrupt(format!("{what} length overflows")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DualEncoderModel, RunHistory)> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, pos: 12 };
    let header_len = r.len("header length")?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let mut params = Params::zeros(&header.arch);
    if header.tensors.len() != Params::NAMES.len() {
        return Err(Error::Corrupt("unexpected tensor count".into()));
    }
    for ((entry, name), shape) in header.tensors.iter().zip(Params::NAMES).zip(params.shapes()) {
        if entry.name != name || entry.shape != shape {
            return Err(Error::Corrupt(format!(
                "tensor {} {:?} does not match architecture ({name} {shape:?})",
                entry.name, entry.shape
            )));
        }
    }
    for dst in params.slices_mut() {
        let raw = r.take(4 * dst.len(), "parameters")?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::Corrupt("non-finite parameter".into()));
            }
            *d = v as f64;
        }
    }
    let history_len = r.len("history length")?;
    let history_text = std::str::from_utf8(r.take(history_len, "history")?)
        .map_err(|_| Error::Corrupt("history is not UTF-8".into()))?;
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes before digest".into()));
    }
    let history = RunHistory::from_lines(history_text)?;
    let model = DualEncoderModel::from_parts(header.arch, params)?;
    Ok((model, history))
}

pub fn save_checkpoint(model: &DualEncoderModel, history: &RunHistory, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, history)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(DualEncoderModel, RunHistory)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
