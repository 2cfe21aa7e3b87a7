//! Single-file checkpoint format.
//!
//! ```text
//! offset 0   "EDSG"
//!        4   u32 version
//!        8   u64 manifest length M
//!       16   M bytes of UTF-8 JSON manifest
//!            zero padding to a multiple of 64
//! payload    raw little-endian f32 tensors, each starting 64-byte aligned
//! ```
//!
//! The manifest is `{"meta": {...}, "tensors": {name: {"dtype": "f32",
//! "shape": [...], "offset": o, "length": n}}, "digest": {...}}` with
//! offsets relative to the payload start and lengths in bytes. `digest`
//! holds sha256 hashes of the compact JSON of `[meta, tensors]` and of the
//! payload bytes, so edits that still parse are caught.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::model::checkpoint::{CheckpointMeta, NamedCheckpoint};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EDSG";
const VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Digest {
    manifest: String,
    payload: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    meta: CheckpointMeta,
    tensors: BTreeMap<String, Entry>,
    digest: Digest,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_digest(meta: &CheckpointMeta, tensors: &BTreeMap<String, Entry>) -> Result<String> {
    let body = serde_json::to_vec(&(meta, tensors)).map_err(|e| Error::Format(format!("manifest encoding: {e}")))?;
    Ok(sha256_hex(&body))
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode_checkpoint(ckpt: &NamedCheckpoint) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in ckpt.iter() {
        let length = t.numel() * 4;
        tensors.insert(
            name.to_string(),
            Entry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length,
            },
        );
        offset = align(offset + length);
    }
    let mut payload = Vec::with_capacity(offset);
    for ((_, t), entry) in ckpt.iter().zip(tensors.values()) {
        payload.resize(entry.offset, 0);
        for v in t.data() {
            payload.extend(v.to_le_bytes());
        }
    }
    let digest = Digest {
        manifest: manifest_digest(ckpt.meta(), &tensors)?,
        payload: sha256_hex(&payload),
    };
    let manifest = Manifest {
        meta: ckpt.meta().clone(),
        tensors,
        digest,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encoding: {e}")))?;
    let payload_start = align(16 + json.len());
    let mut buf = Vec::with_capacity(payload_start + payload.len());
    buf.extend(MAGIC);
    buf.extend(VERSION.to_le_bytes());
    buf.extend((json.len() as u64).to_le_bytes());
    buf.extend(&json);
    buf.resize(payload_start, 0);
    buf.extend(payload);
    Ok(buf)
}

/// Parses and fully validates a checkpoint image. Structural damage is a
/// `Format` error; a well-formed file whose shapes disagree with its
/// configuration is a `Validation` error naming the tensor.
pub fn decode_checkpoint(buf: &[u8]) -> Result<NamedCheckpoint> {
    if buf.len() < 16 || &buf[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    let mend = usize::try_from(mlen)
        .ok()
        .and_then(|m| m.checked_add(16))
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Format("manifest extends past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&buf[16..mend])
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let payload = align(mend);
    if payload > buf.len() && !manifest.tensors.is_empty() {
        return Err(Error::Format("payload missing".into()));
    }

    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, e) in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("{name}: unsupported dtype {}", e.dtype)));
        }
        if e.offset % ALIGN != 0 {
            return Err(Error::Format(format!("{name}: offset {} not aligned", e.offset)));
        }
        let numel = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if numel.and_then(|n| n.checked_mul(4)) != Some(e.length) {
            return Err(Error::Format(format!(
                "{name}: byte length {} does not match shape {:?}",
                e.length, e.shape
            )));
        }
        let start = payload
            .checked_add(e.offset)
            .filter(|s| s.checked_add(e.length).is_some_and(|end| end <= buf.len()))
            .ok_or_else(|| Error::Format(format!("{name}: data extends past end of file")))?;
        spans.push((e.offset, e.offset + e.length, name));
        let data = buf[start..start + e.length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format(format!("{} overlaps {}", w[1].2, w[0].2)));
        }
    }
    if let Some((name, _)) = tensors.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::Format(format!("{name}: non-finite values")));
    }
    let ckpt = NamedCheckpoint::new(manifest.meta.clone(), tensors)?;
    if manifest_digest(&manifest.meta, &manifest.tensors)? != manifest.digest.manifest {
        return Err(Error::Format("manifest digest mismatch".into()));
    }
    if sha256_hex(buf.get(payload..).unwrap_or_default()) != manifest.digest.payload {
        return Err(Error::Format("payload digest mismatch".into()));
    }
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &NamedCheckpoint, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<NamedCheckpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
