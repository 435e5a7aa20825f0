//! Single-file tensor container (format version "1") and model fingerprints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [0, 8)          magic  b"FPTENSOR"
//! [8, 16)         u64    manifest length M
//! [16, 16+M)      UTF-8 JSON manifest
//! ...             zero padding up to the next multiple of 8 (body start)
//! body            tensor payloads, raw f32, offsets relative to body start
//! [len-32, len)   SHA-256 of every preceding byte
//! ```
//!
//! The manifest is `{"format_version": "1", "config": {..}, "tensors":
//! [{"name", "dtype": "f32", "shape", "offset", "length"}, ..]}`. Payload
//! offsets are 8-byte aligned and must not overlap.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ContainerError, Result};
use crate::generator::{tensor_specs, GeneratorConfig, GeneratorModel, W_AVG_NAME};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FPTENSOR";
pub const FORMAT_VERSION: &str = "1";
const PREFIX_LEN: usize = 16;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub config: GeneratorConfig,
    pub tensors: Vec<TensorEntry>,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

/// Hex SHA-256 over the config and all weights in directory order.
/// `w_avg` is derived data and is not covered.
pub fn fingerprint(model: &GeneratorModel) -> String {
    let mut h = Sha256::new();
    h.update(b"fp-model-v1\0");
    h.update(serde_json::to_vec(model.config()).expect("config serializes"));
    for (name, t) in model.named_tensors() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Serializes a model (including `w_avg` when present).
pub fn container_bytes(model: &GeneratorModel) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor)> = model.named_tensors();
    if let Some(w) = model.w_avg() {
        tensors.push((W_AVG_NAME.to_string(), w));
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        let length = 4 * t.len() as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset = align8((offset + length) as usize) as u64;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        config: model.config().clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let body_start = align8(PREFIX_LEN + json.len());
    let mut out = Vec::with_capacity(body_start + offset as usize + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(body_start, 0);
    for ((_, t), entry) in tensors.iter().zip(&manifest.tensors) {
        out.resize(body_start + entry.offset as usize, 0);
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(body_start + offset as usize, 0);
    seal(&mut out);
    out
}

/// Appends the trailing checksum.
pub fn seal(bytes: &mut Vec<u8>) {
    let digest = Sha256::digest(&bytes[..]);
    bytes.extend_from_slice(&digest);
}

pub fn write_container(model: &GeneratorModel, path: &Path) -> Result<()> {
    let bytes = container_bytes(model);
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<GeneratorModel> {
    let bytes = std::fs::read(path)?;
    parse_container(&bytes)
}

/// Parses and validates a container held in memory. Never reads outside
/// the declared ranges; every failure is a [`ContainerError`].
pub fn parse_container(bytes: &[u8]) -> Result<GeneratorModel> {
    let manifest = parse_manifest(bytes)?;
    let body_start = align8(PREFIX_LEN + manifest_len(bytes)?);
    let body = &bytes[body_start..bytes.len() - CHECKSUM_LEN];
    let entries = validate_directory(&manifest, body.len() as u64)?;

    let mut tensors = BTreeMap::new();
    for e in entries {
        let start = e.offset as usize;
        let raw = &body[start..start + e.length as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ContainerError::NonFinite(e.name.clone()).into());
        }
        let t = Tensor::new(e.shape.clone(), data).map_err(|_| ContainerError::LengthMismatch {
            name: e.name.clone(),
            length: e.length,
        })?;
        tensors.insert(e.name.clone(), t);
    }
    GeneratorModel::from_tensors(manifest.config, tensors)
}

fn manifest_len(bytes: &[u8]) -> Result<usize, ContainerError> {
    let raw: [u8; 8] = bytes[8..16].try_into().expect("8-byte slice");
    let len = u64::from_le_bytes(raw);
    let limit = bytes.len().saturating_sub(PREFIX_LEN + CHECKSUM_LEN) as u64;
    if len > limit {
        return Err(ContainerError::Manifest {
            offset: 8,
            reason: format!("manifest length {len} exceeds file size {}", bytes.len()),
        });
    }
    Ok(len as usize)
}

/// Checks magic, checksum and version, and decodes the JSON manifest.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest, ContainerError> {
    if bytes.len() < PREFIX_LEN + CHECKSUM_LEN || &bytes[..8] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let (content, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(ContainerError::Manifest {
            offset: bytes.len() - CHECKSUM_LEN,
            reason: "checksum mismatch".into(),
        });
    }
    let len = manifest_len(bytes)?;
    let json = &bytes[PREFIX_LEN..PREFIX_LEN + len];
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| json_error(json, &e))?;
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => return Err(ContainerError::VersionMismatch(other.to_string())),
        None => return Err(ContainerError::VersionMismatch("<missing>".into())),
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| ContainerError::Manifest {
        offset: PREFIX_LEN,
        reason: e.to_string(),
    })?;
    manifest.config.validate().map_err(|e| ContainerError::Config(e.to_string()))?;
    Ok(manifest)
}

fn json_error(json: &[u8], e: &serde_json::Error) -> ContainerError {
    // Convert serde's line/column into an absolute file offset.
    let mut offset = 0usize;
    for (i, line) in json.split(|&b| b == b'\n').enumerate() {
        if i + 1 == e.line() {
            offset += e.column().saturating_sub(1);
            break;
        }
        offset += line.len() + 1;
    }
    ContainerError::Manifest { offset: PREFIX_LEN + offset, reason: e.to_string() }
}

/// Validates every directory entry against the body and the config, and
/// returns them in offset order.
fn validate_directory(manifest: &Manifest, body_len: u64) -> Result<Vec<&TensorEntry>, ContainerError> {
    let mut required: BTreeMap<String, Vec<usize>> = tensor_specs(&manifest.config).into_iter().collect();
    let mut seen = BTreeMap::new();
    for e in &manifest.tensors {
        if seen.insert(e.name.as_str(), ()).is_some() {
            return Err(ContainerError::DuplicateTensor(e.name.clone()));
        }
        if e.dtype != "f32" {
            return Err(ContainerError::UnsupportedDtype { name: e.name.clone(), dtype: e.dtype.clone() });
        }
        let elements = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(4));
        if elements != Some(e.length) {
            return Err(ContainerError::LengthMismatch { name: e.name.clone(), length: e.length });
        }
        if e.offset % 8 != 0 {
            return Err(ContainerError::Misaligned { name: e.name.clone(), offset: e.offset });
        }
        match e.offset.checked_add(e.length) {
            Some(end) if end <= body_len => {}
            _ => {
                return Err(ContainerError::OutOfBounds {
                    name: e.name.clone(),
                    offset: e.offset,
                    length: e.length,
                    body_len,
                })
            }
        }
        let expected = if e.name == W_AVG_NAME {
            Some(vec![manifest.config.latent_dim])
        } else {
            required.remove(&e.name)
        };
        match expected {
            None => return Err(ContainerError::UnknownTensor(e.name.clone())),
            Some(shape) if shape != e.shape => {
                return Err(ContainerError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: shape,
                    found: e.shape.clone(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(name) = required.keys().next() {
        return Err(ContainerError::MissingTensor(name.clone()));
    }
    let mut ordered: Vec<&TensorEntry> = manifest.tensors.iter().collect();
    ordered.sort_by_key(|e| (e.offset, e.length));
    for pair in ordered.windows(2) {
        if pair[1].length > 0 && pair[0].offset + pair[0].length > pair[1].offset {
            return Err(ContainerError::OverlappingRanges {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    Ok(ordered)
}
