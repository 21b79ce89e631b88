// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor checkpoint containers.
//!
//! The on-disk layout is the one diffusion checkpoints ship in: an 8-byte
//! little-endian header length `N`, `N` bytes of UTF-8 JSON describing every
//! tensor (`dtype`, `shape`, `data_offsets`), then the concatenated raw
//! little-endian payload. Only `F32` and `F16` tensors are supported.
//!
//! Entries keep container order (the order of their payloads), and the
//! writer lays payloads out in that same order with a compact header padded
//! by spaces to a multiple of eight bytes. A file produced by the reference
//! writer therefore survives `read_container` → `write_container` unchanged
//! byte for byte.

use std::fs;
use std::path::Path;

use half::f16;
use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Key projection name filter for SD-1.5 UNet cross-attention.
pub const DEFAULT_KEY_PATTERN: &str = "attn2.to_k.weight";
/// Value projection name filter for SD-1.5 UNet cross-attention.
pub const DEFAULT_VALUE_PATTERN: &str = "attn2.to_v.weight";

const METADATA_KEY: &str = "__metadata__";
const HEADER_ALIGN: usize = 8;
/// Refuse headers larger than this; real checkpoints stay well under 1 MiB.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// Storage dtype of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            _ => None,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One tensor: dtype, shape, raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorEntry {
    /// Encodes `values` (row-major) into `dtype`, rounding when narrowing.
    pub fn from_f32(dtype: Dtype, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            dtype,
            shape,
            data: encode(dtype, values.iter().copied()),
        })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decodes the payload to `f32`. Exact for both supported dtypes.
    pub fn to_f32(&self) -> Vec<f32> {
        match self.dtype {
            Dtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Dtype::F16 => self
                .data
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::InvalidMap(format!(
                "tensor `{name}` has a zero dimension in shape {:?}",
                self.shape
            )));
        }
        let expected = self.numel() * self.dtype.width();
        if expected != self.data.len() {
            return Err(Error::ByteLengthMismatch {
                name: name.to_string(),
                offset: 0,
                expected,
                found: self.data.len(),
            });
        }
        Ok(())
    }
}

fn encode(dtype: Dtype, values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::new();
    match dtype {
        Dtype::F32 => values.for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F16 => values.for_each(|v| out.extend_from_slice(&f16::from_f32(v).to_le_bytes())),
    }
    out
}

/// In-memory image of a checkpoint container.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NamedTensorMap {
    metadata: Option<IndexMap<String, String>>,
    entries: IndexMap<String, TensorEntry>,
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends (or replaces in place) a tensor after validating it.
    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name == METADATA_KEY {
            return Err(Error::InvalidMap(format!("invalid tensor name `{name}`")));
        }
        entry.check(&name)?;
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tensors in container order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn metadata(&self) -> Option<&IndexMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<IndexMap<String, String>>) {
        self.metadata = metadata;
    }

    fn validate(&self) -> Result<()> {
        for (name, entry) in &self.entries {
            if name.is_empty() || name == METADATA_KEY {
                return Err(Error::InvalidMap(format!("invalid tensor name `{name}`")));
            }
            entry.check(name)?;
        }
        Ok(())
    }

    /// Parses a container image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader {
                offset: 0,
                reason: format!("file is {} bytes, shorter than the length prefix", bytes.len()),
            });
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_LEN || 8 + header_len > bytes.len() as u64 {
            return Err(Error::MalformedHeader {
                offset: 0,
                reason: format!("header length {header_len} exceeds file size {}", bytes.len()),
            });
        }
        let header_end = 8 + header_len as usize;
        let header = std::str::from_utf8(&bytes[8..header_end]).map_err(|e| Error::MalformedHeader {
            offset: 8 + e.valid_up_to() as u64,
            reason: "header is not UTF-8".into(),
        })?;
        let raw: IndexMap<String, serde_json::Value> =
            serde_json::from_str(header).map_err(|e| Error::MalformedHeader {
                offset: 8,
                reason: e.to_string(),
            })?;

        #[derive(Deserialize)]
        struct RawEntry {
            dtype: String,
            shape: Vec<usize>,
            data_offsets: [u64; 2],
        }

        let payload = &bytes[header_end..];
        let mut metadata = None;
        let mut parsed = Vec::with_capacity(raw.len());
        for (name, value) in raw {
            if name == METADATA_KEY {
                let md: IndexMap<String, String> =
                    serde_json::from_value(value).map_err(|e| Error::MalformedHeader {
                        offset: 8,
                        reason: format!("`{METADATA_KEY}`: {e}"),
                    })?;
                metadata = Some(md);
                continue;
            }
            if name.is_empty() {
                return Err(Error::MalformedHeader {
                    offset: 8,
                    reason: "empty tensor name".into(),
                });
            }
            let entry: RawEntry = serde_json::from_value(value).map_err(|e| Error::MalformedHeader {
                offset: 8,
                reason: format!("tensor `{name}`: {e}"),
            })?;
            parsed.push((name, entry));
        }
        parsed.sort_by_key(|(_, e)| e.data_offsets[0]);

        let mut entries = IndexMap::with_capacity(parsed.len());
        let mut cursor = 0u64;
        for (name, raw) in parsed {
            let [begin, end] = raw.data_offsets;
            let abs = header_end as u64 + begin;
            let dtype = Dtype::parse(&raw.dtype).ok_or_else(|| Error::UnsupportedDtype {
                name: name.clone(),
                offset: abs,
                dtype: raw.dtype.clone(),
            })?;
            if begin != cursor || end < begin || end > payload.len() as u64 {
                return Err(Error::MalformedHeader {
                    offset: abs,
                    reason: format!(
                        "tensor `{name}` has data_offsets [{begin}, {end}], expected to start at {cursor} \
                         within a {}-byte payload",
                        payload.len()
                    ),
                });
            }
            if raw.shape.contains(&0) {
                return Err(Error::MalformedHeader {
                    offset: abs,
                    reason: format!("tensor `{name}` has zero dimension in {:?}", raw.shape),
                });
            }
            let expected = raw.shape.iter().product::<usize>() * dtype.width();
            let found = (end - begin) as usize;
            if expected != found {
                return Err(Error::ByteLengthMismatch {
                    name,
                    offset: abs,
                    expected,
                    found,
                });
            }
            let data = payload[begin as usize..end as usize].to_vec();
            if entries
                .insert(
                    name.clone(),
                    TensorEntry {
                        dtype,
                        shape: raw.shape,
                        data,
                    },
                )
                .is_some()
            {
                return Err(Error::MalformedHeader {
                    offset: abs,
                    reason: format!("duplicate tensor `{name}`"),
                });
            }
            cursor = end;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::MalformedHeader {
                offset: header_end as u64 + cursor,
                reason: format!("{} trailing payload bytes", payload.len() as u64 - cursor),
            });
        }
        Ok(Self { metadata, entries })
    }

    /// Serializes to the container layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;

        #[derive(Serialize)]
        struct HeaderEntry<'a> {
            dtype: &'a str,
            shape: &'a [usize],
            data_offsets: [usize; 2],
        }

        let mut header = serde_json::Map::new();
        if let Some(md) = &self.metadata {
            header.insert(METADATA_KEY.to_string(), serde_json::to_value(md)?);
        }
        let mut offset = 0usize;
        for (name, entry) in &self.entries {
            let end = offset + entry.data.len();
            header.insert(
                name.clone(),
                serde_json::to_value(HeaderEntry {
                    dtype: entry.dtype.as_str(),
                    shape: &entry.shape,
                    data_offsets: [offset, end],
                })?,
            );
            offset = end;
        }
        let mut header = serde_json::to_vec(&serde_json::Value::Object(header))?;
        let padded = header.len().div_ceil(HEADER_ALIGN) * HEADER_ALIGN;
        header.resize(padded, b' ');

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for entry in self.entries.values() {
            out.extend_from_slice(&entry.data);
        }
        Ok(out)
    }
}

/// Reads a container file.
pub fn read_container(path: impl AsRef<Path>) -> Result<NamedTensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    NamedTensorMap::from_bytes(&bytes)
}

/// Writes a container file.
pub fn write_container(map: &NamedTensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = map.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One cross-attention layer's key and value projections (`m × d`, compute
/// dtype `f32`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLayer {
    pub layer_id: String,
    pub key_name: String,
    pub value_name: String,
    pub key: DMatrix<f32>,
    pub value: DMatrix<f32>,
    pub source_dtype: Dtype,
}

impl ProjectionLayer {
    /// `(m, d)`: output width and text-embedding width.
    pub fn shape(&self) -> (usize, usize) {
        self.key.shape()
    }

    pub fn d(&self) -> usize {
        self.key.ncols()
    }
}

fn matrix_from_entry(name: &str, entry: &TensorEntry) -> Result<DMatrix<f32>> {
    if entry.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: vec![0, 0],
            got: entry.shape.clone(),
        });
    }
    let (m, d) = (entry.shape[0], entry.shape[1]);
    Ok(DMatrix::from_row_slice(m, d, &entry.to_f32()))
}

fn row_major(matrix: &DMatrix<f32>) -> Vec<f32> {
    matrix.transpose().as_slice().to_vec()
}

/// Common prefix of two names, cut back to the last `.` boundary.
fn shared_prefix(a: &str, b: &str) -> String {
    let common = a
        .char_indices()
        .zip(b.chars())
        .take_while(|((_, x), y)| x == y)
        .last()
        .map(|((i, c), _)| i + c.len_utf8())
        .unwrap_or(0);
    let prefix = &a[..common];
    match prefix.rfind('.') {
        Some(dot) => prefix[..dot].to_string(),
        None => prefix.to_string(),
    }
}

/// Pairs key/value projection tensors by shared prefix.
///
/// A tensor is a key projection when its name contains `key_pattern`; its
/// partner is the same name with `key_pattern` replaced by `value_pattern`.
pub fn extract_cross_attention(
    map: &NamedTensorMap,
    key_pattern: &str,
    value_pattern: &str,
) -> Result<Vec<ProjectionLayer>> {
    if key_pattern.is_empty() || value_pattern.is_empty() || key_pattern == value_pattern {
        return Err(Error::InvalidArgument(format!(
            "key/value patterns must be distinct and non-empty (got `{key_pattern}`, `{value_pattern}`)"
        )));
    }
    let mut layers = Vec::new();
    for (name, entry) in map.iter() {
        if name.contains(key_pattern) {
            let partner = name.replacen(key_pattern, value_pattern, 1);
            let Some(value_entry) = map.get(&partner) else {
                return Err(Error::UnpairedLayer {
                    prefix: name.replacen(key_pattern, "", 1).trim_end_matches('.').to_string(),
                    present: name.to_string(),
                    missing: partner,
                });
            };
            let key = matrix_from_entry(name, entry)?;
            let value = matrix_from_entry(&partner, value_entry)?;
            if key.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    name: partner,
                    expected: vec![key.nrows(), key.ncols()],
                    got: value_entry.shape.clone(),
                });
            }
            if entry.dtype != value_entry.dtype {
                return Err(Error::InvalidMap(format!(
                    "`{name}` is {} but `{partner}` is {}",
                    entry.dtype, value_entry.dtype
                )));
            }
            layers.push(ProjectionLayer {
                layer_id: shared_prefix(name, &partner),
                key_name: name.to_string(),
                value_name: partner,
                key,
                value,
                source_dtype: entry.dtype,
            });
        } else if name.contains(value_pattern) {
            let partner = name.replacen(value_pattern, key_pattern, 1);
            if map.get(&partner).is_none() {
                return Err(Error::UnpairedLayer {
                    prefix: name.replacen(value_pattern, "", 1).trim_end_matches('.').to_string(),
                    present: name.to_string(),
                    missing: partner,
                });
            }
        }
    }
    Ok(layers)
}

/// Returns a copy of `map` with every layer's projections written back,
/// rounded to the stored dtype. Untouched tensors keep their exact bytes.
pub fn patch_layers(map: &NamedTensorMap, layers: &[ProjectionLayer]) -> Result<NamedTensorMap> {
    let mut out = map.clone();
    for layer in layers {
        for (name, matrix) in [(&layer.key_name, &layer.key), (&layer.value_name, &layer.value)] {
            let entry = out
                .entries
                .get_mut(name.as_str())
                .ok_or_else(|| Error::UnknownLayer(layer.layer_id.clone()))?;
            let got = vec![matrix.nrows(), matrix.ncols()];
            if entry.shape != got {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: entry.shape.clone(),
                    got,
                });
            }
            entry.data = encode(entry.dtype, row_major(matrix).into_iter());
        }
    }
    Ok(out)
}
