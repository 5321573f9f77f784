//! The `SPG1` binary container.
//!
//! ```text
//! "SPG1" | u32 LE header length | UTF-8 JSON header | payload
//! ```
//!
//! The header is `{schema_version, tensors: [{name, dtype, shape,
//! byte_offset, byte_len}], meta}`; offsets are relative to the start of the
//! payload, which holds little-endian `f32` values in row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diff::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPG1";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

/// Tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub tensors: Vec<NamedTensor>,
    pub meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("container has no tensor named {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            if entries.iter().any(|e: &Entry| e.name == t.name) {
                return Err(Error::Contract(format!("duplicate tensor name {:?}", t.name)));
            }
            if let Some(i) = t.tensor.data().iter().position(|v| !(*v as f32).is_finite()) {
                return Err(Error::Contract(format!(
                    "tensor {:?} element {i} ({}) is not a finite f32",
                    t.name,
                    t.tensor.data()[i]
                )));
            }
            let len = 4 * t.tensor.len() as u64;
            entries.push(Entry {
                name: t.name.clone(),
                dtype: "f32".into(),
                shape: t.tensor.shape().to_vec(),
                byte_offset: offset,
                byte_len: len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            schema_version: SCHEMA_VERSION,
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Contract("container header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.tensor.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates a container image.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, detail: String| Error::Format {
            offset: offset as u64,
            detail,
        };
        if bytes.len() < 8 {
            return Err(fmt(bytes.len(), "file shorter than the 8-byte preamble".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(0, format!("bad magic {:02x?}, expected \"SPG1\"", &bytes[..4])));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let payload_start = 8usize
            .checked_add(header_len)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| fmt(bytes.len(), format!("header of {header_len} bytes is truncated")))?;
        let text = std::str::from_utf8(&bytes[8..payload_start])
            .map_err(|e| fmt(8 + e.valid_up_to(), "header is not valid UTF-8".into()))?;
        let header: Header =
            serde_json::from_str(text).map_err(|e| fmt(8, format!("malformed header JSON: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(fmt(
                8,
                format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", header.schema_version),
            ));
        }
        let payload = &bytes[payload_start..];
        let mut ranges: Vec<(u64, u64, &str)> = Vec::new();
        for e in &header.tensors {
            let at = payload_start as u64 + e.byte_offset;
            if e.dtype != "f32" {
                return Err(fmt(8, format!("tensor {:?} has unsupported dtype {:?}", e.name, e.dtype)));
            }
            let elems = e.shape.iter().try_fold(1u64, |a, d| a.checked_mul(*d as u64));
            if elems.and_then(|n| n.checked_mul(4)) != Some(e.byte_len) {
                return Err(fmt(
                    8,
                    format!("tensor {:?}: byte_len {} does not match shape {:?}", e.name, e.byte_len, e.shape),
                ));
            }
            if e.byte_offset % 4 != 0 {
                return Err(fmt(at as usize, format!("tensor {:?} is not 4-byte aligned", e.name)));
            }
            let end = e.byte_offset.saturating_add(e.byte_len);
            if end > payload.len() as u64 {
                return Err(fmt(
                    bytes.len(),
                    format!(
                        "tensor {:?} spans payload bytes {}..{end} but the payload has {} (truncated)",
                        e.name,
                        e.byte_offset,
                        payload.len()
                    ),
                ));
            }
            ranges.push((e.byte_offset, end, &e.name));
        }
        let mut sorted = ranges.clone();
        sorted.sort();
        for pair in sorted.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(fmt(
                    payload_start + pair[1].0 as usize,
                    format!("tensors {:?} and {:?} overlap", pair[0].2, pair[1].2),
                ));
            }
        }
        let used = sorted.last().map_or(0, |r| r.1);
        if used != payload.len() as u64 {
            return Err(fmt(
                payload_start + used as usize,
                format!("{} unreferenced trailing payload bytes", payload.len() as u64 - used),
            ));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.byte_offset as usize;
            let raw = &payload[start..start + e.byte_len as usize];
            let mut data = Vec::with_capacity(raw.len() / 4);
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(fmt(
                        payload_start + start + 4 * i,
                        format!("non-finite value in tensor {:?} at element {i}", e.name),
                    ));
                }
                data.push(v as f64);
            }
            tensors.push(NamedTensor::new(e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        Ok(Self {
            tensors,
            meta: header.meta,
        })
    }
}

/// Writes atomically: the file appears complete or not at all.
pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let bytes = container.encode()?;
    write_atomic(path, &bytes)
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::decode(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
