//! OWQT v1 tensor-archive container.
//!
//! Layout: the ASCII magic `OWQT1\n`, one UTF-8 JSON header line mapping
//! entry name → `{dtype, shape, offset, nbytes}`, then a single raw payload
//! blob. Offsets are relative to the payload start and 64-byte aligned;
//! all scalars are little-endian. Archive-level string metadata rides in
//! the reserved `__meta__` header key, so `__meta__` is not a legal entry
//! name. Supported dtypes: `f32`, `f16`, `u32`, `u16`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{OwqError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"OWQT1\n";
const ALIGN: usize = 64;
const META_KEY: &str = "__meta__";

/// Element type of an archive entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F16,
    U32,
    U16,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F16 | DType::U16 => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::U32 => "u32",
            DType::U16 => "u16",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f16" => Ok(DType::F16),
            "u32" => Ok(DType::U32),
            "u16" => Ok(DType::U16),
            other => Err(OwqError::MalformedHeader(format!("unknown dtype '{other}'"))),
        }
    }
}

/// Typed payload of one entry. F16 values are kept as raw bit patterns so
/// roundtrips stay bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F16(Vec<u16>),
    U32(Vec<u32>),
    U16(Vec<u16>),
}

impl EntryData {
    fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F16(_) => DType::F16,
            EntryData::U32(_) => DType::U32,
            EntryData::U16(_) => DType::U16,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F16(v) | EntryData::U16(v) => v.len(),
            EntryData::U32(v) => v.len(),
        }
    }
}

/// One named tensor inside an archive.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: EntryData,
}

/// In-memory archive: named typed tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, Entry>,
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(rename = "__meta__", default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
    #[serde(flatten)]
    entries: BTreeMap<String, HeaderEntry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of tensor entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Insert a typed entry. Fails on name collisions or the reserved name.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: EntryData) -> Result<()> {
        if name == META_KEY {
            return Err(OwqError::InvalidParam(format!("'{META_KEY}' is a reserved name")));
        }
        if self.entries.contains_key(name) {
            return Err(OwqError::DuplicateEntry(name.to_string()));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(OwqError::ShapeMismatch(format!(
                "entry '{name}': shape {shape:?} implies {expect} elements, got {}",
                data.len()
            )));
        }
        self.entries.insert(name.to_string(), Entry { shape, data });
        Ok(())
    }

    /// Insert an f32 tensor.
    pub fn insert_f32(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let shape = tensor.shape().to_vec();
        self.insert(name, shape, EntryData::F32(tensor.into_data()))
    }

    /// Look up a raw entry.
    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| OwqError::MissingEntry(name.to_string()))
    }

    /// Look up an f32 entry as a [`Tensor`].
    pub fn get_f32(&self, name: &str) -> Result<Tensor> {
        match &self.get(name)?.data {
            EntryData::F32(v) => Tensor::new(self.entries[name].shape.clone(), v.clone()),
            other => Err(OwqError::MissingEntry(format!(
                "'{name}' has dtype {}, expected f32",
                other.dtype().name()
            ))),
        }
    }

    /// Look up an f16 entry, widening each element to f32.
    pub fn get_f16_widened(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        match &self.get(name)?.data {
            EntryData::F16(bits) => Ok((
                self.entries[name].shape.clone(),
                bits.iter().map(|&b| f16::from_bits(b).to_f32()).collect(),
            )),
            other => Err(OwqError::MissingEntry(format!(
                "'{name}' has dtype {}, expected f16",
                other.dtype().name()
            ))),
        }
    }

    /// Set a metadata string.
    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    fn validate_for_write(&self) -> Result<()> {
        for (name, e) in &self.entries {
            if e.shape.contains(&0) {
                return Err(OwqError::DegenerateShape {
                    name: name.clone(),
                    shape: e.shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Serialize the archive to bytes. Entry payloads are laid out in sorted
    /// name order, each 64-byte aligned, so output is deterministic.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate_for_write()?;
        let mut header = Header { meta: self.metadata.clone(), entries: BTreeMap::new() };
        let mut payload: Vec<u8> = Vec::new();
        for (name, e) in &self.entries {
            while !payload.len().is_multiple_of(ALIGN) {
                payload.push(0);
            }
            let offset = payload.len() as u64;
            match &e.data {
                EntryData::F32(v) => {
                    for x in v {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                }
                EntryData::F16(v) | EntryData::U16(v) => {
                    for x in v {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                }
                EntryData::U32(v) => {
                    for x in v {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
            header.entries.insert(
                name.clone(),
                HeaderEntry {
                    dtype: e.data.dtype().name().to_string(),
                    shape: e.shape.clone(),
                    offset,
                    nbytes: (e.data.len() * e.data.dtype().size()) as u64,
                },
            );
        }
        let mut out = Vec::with_capacity(MAGIC.len() + payload.len() + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parse an archive from bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(OwqError::MalformedHeader("missing OWQT1 magic".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| OwqError::MalformedHeader("unterminated header line".into()))?;
        let header_str = std::str::from_utf8(&rest[..nl])
            .map_err(|_| OwqError::MalformedHeader("header is not UTF-8".into()))?;
        let header: Header = serde_json::from_str(header_str)?;
        let payload = &rest[nl + 1..];

        let mut expected_end = 0usize;
        let mut archive = TensorArchive { entries: BTreeMap::new(), metadata: header.meta };
        for (name, he) in header.entries {
            let dtype = DType::parse(&he.dtype)?;
            if he.shape.contains(&0) {
                return Err(OwqError::DegenerateShape { name, shape: he.shape });
            }
            let count: usize = he.shape.iter().product();
            if he.nbytes as usize != count * dtype.size() {
                return Err(OwqError::MalformedHeader(format!(
                    "entry '{name}': nbytes {} does not match shape {:?} ({})",
                    he.nbytes,
                    he.shape,
                    dtype.name()
                )));
            }
            if !(he.offset as usize).is_multiple_of(ALIGN) {
                return Err(OwqError::MalformedHeader(format!(
                    "entry '{name}': offset {} not {ALIGN}-byte aligned",
                    he.offset
                )));
            }
            let start = he.offset as usize;
            let end = start + he.nbytes as usize;
            if end > payload.len() {
                return Err(OwqError::PayloadLengthMismatch(format!(
                    "entry '{name}' needs bytes [{start}, {end}) but payload has {}",
                    payload.len()
                )));
            }
            expected_end = expected_end.max(end);
            let raw = &payload[start..end];
            let data = match dtype {
                DType::F32 => {
                    let v: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(OwqError::NonFinite(name));
                    }
                    EntryData::F32(v)
                }
                DType::F16 => {
                    let v: Vec<u16> = raw
                        .chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    if v.iter().any(|&b| !f16::from_bits(b).is_finite()) {
                        return Err(OwqError::NonFinite(name));
                    }
                    EntryData::F16(v)
                }
                DType::U32 => EntryData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::U16 => EntryData::U16(
                    raw.chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            archive.entries.insert(name, Entry { shape: he.shape, data });
        }
        if payload.len() != expected_end {
            return Err(OwqError::PayloadLengthMismatch(format!(
                "payload has {} bytes, entries account for {expected_end}",
                payload.len()
            )));
        }
        Ok(archive)
    }

    /// Write the archive to a file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Read an archive from a file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
