//! Tensor container file: an 8-byte little-endian header length, a JSON
//! header, then a blob of little-endian `f32` values.
//!
//! ```text
//! [u64 LE header_len][header_len bytes of JSON][raw f32 LE blob]
//! header = {"format_version": 1, "config": <any>, "tensors": [{name, shape, byte_offset, byte_len}]}
//! ```
//! Offsets are relative to the start of the blob. Writing is deterministic,
//! so save, load, save produces identical bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header<C> {
    format_version: u32,
    config: C,
    tensors: Vec<TensorEntry>,
}

/// Decoded container: its `config` payload and named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile<C> {
    pub config: C,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl<C> TensorFile<C> {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode<C: Serialize>(config: &C, tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let len = (t.numel() * 4) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
            byte_len: len,
        });
        offset += len;
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<C: DeserializeOwned>(bytes: &[u8]) -> Result<TensorFile<C>> {
    let parse = |detail: String| Error::Parse {
        field: "checkpoint".into(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(parse("file shorter than the header length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let blob_start = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse(format!("header length {header_len} exceeds file size")))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[8..blob_start])?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| parse("missing format_version".into()))? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header<C> = serde_json::from_value(raw)?;
    let blob = &bytes[blob_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start
            .checked_add(e.byte_len as usize)
            .filter(|&end| end <= blob.len() && e.byte_len as usize == numel * 4)
            .ok_or_else(|| Error::Parse {
                field: e.name.clone(),
                detail: "tensor bytes out of range or inconsistent with shape".into(),
            })?;
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&e.shape, data).map_err(|err| Error::Parse {
            field: e.name.clone(),
            detail: err.to_string(),
        })?;
        tensors.push((e.name, t));
    }
    Ok(TensorFile {
        config: header.config,
        tensors,
    })
}

pub fn save<C: Serialize>(path: &Path, config: &C, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(config, tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<C: DeserializeOwned>(path: &Path) -> Result<TensorFile<C>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip_is_byte_identical() {
        let tensors = vec![
            ("a".to_string(), Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 1e-7]).unwrap()),
            ("b".to_string(), Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap()),
        ];
        let cfg = serde_json::json!({"k": 0.1});
        let bytes = encode(&cfg, &tensors).unwrap();
        let back: TensorFile<serde_json::Value> = decode(&bytes).unwrap();
        assert_eq!(back.tensors, tensors);
        assert_eq!(encode(&back.config, &back.tensors).unwrap(), bytes);
    }

    #[test]
    fn rejects_other_versions() {
        let header = br#"{"format_version":7,"config":null,"tensors":[]}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        let err = decode::<serde_json::Value>(&bytes).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 7, .. }));
    }

    #[test]
    fn rejects_truncated_blob() {
        let t = vec![("a".to_string(), Tensor::from_vec(&[4], vec![1.0; 4]).unwrap())];
        let bytes = encode(&(), &t).unwrap();
        assert!(decode::<()>(&bytes[..bytes.len() - 1]).is_err());
    }
}
