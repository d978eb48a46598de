//! Named-tensor checkpoints and their on-disk container.
//!
//! Container layout:
//!
//! ```text
//! ┌──────────────┬───────────────────┬─────────────────────┬──────────────┐
//! │ bytes 0..8   │ bytes 8..16       │ bytes 16..16+H      │ data region  │
//! │ magic        │ header length H   │ UTF-8 JSON header   │ raw LE f32   │
//! │ `RACKPT01`   │ (u64 LE)          │                     │ payloads     │
//! └──────────────┴───────────────────┴─────────────────────┴──────────────┘
//! ```
//!
//! The header is `{"tensors": {name: {"dtype", "shape", "offset", "nbytes"}},
//! "metadata": {...}}` with offsets relative to the start of the data region.
//! Payloads are laid out in lexicographic name order with no padding, so the
//! serialized bytes are a canonical function of the checkpoint contents:
//! hashing them is invariant to tensor insertion order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pattern::PatternSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RACKPT01";

/// An ordered map of tensor name -> f32 tensor, plus string metadata.
///
/// Iteration order is lexicographic by name; that order is also the canonical
/// payload order in the container format. Checkpoints are immutable in spirit:
/// the toolkit's operations take them by reference and return new values.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    /// Inserts a tensor, replacing any existing entry with the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Tensors in lexicographic name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total element count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Serializes to the container format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: BTreeMap<&str, TensorEntry> = BTreeMap::new();
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            validate_name(name)?;
            let nbytes = (tensor.len() * 4) as u64;
            entries.insert(
                name,
                TensorEntry {
                    dtype: DTYPE_F32.to_string(),
                    shape: tensor.shape().to_vec(),
                    offset,
                    nbytes,
                },
            );
            offset += nbytes;
        }
        let header = serde_json::to_vec(&HeaderOut {
            tensors: entries,
            metadata: &self.metadata,
        })?;

        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for tensor in self.tensors.values() {
            for v in tensor.data() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("refusing to write checkpoint".to_string()));
                }
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses the container format, reporting each malformation distinctly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated(format!(
                "file is {} bytes, shorter than the 16-byte fixed header",
                bytes.len()
            )));
        }
        if &bytes[0..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize.checked_add(header_len).ok_or_else(|| {
            Error::Truncated("header length overflows file bounds".to_string())
        })?;
        if data_start > bytes.len() {
            return Err(Error::Truncated(format!(
                "declared header length {header_len} extends past end of file"
            )));
        }
        let header: HeaderIn = serde_json::from_slice(&bytes[16..data_start])?;
        let mut seen: BTreeMap<String, TensorEntry> = BTreeMap::new();
        for (name, entry) in header.tensors.0 {
            if seen.insert(name.clone(), entry).is_some() {
                return Err(Error::DuplicateName(name));
            }
        }

        let data = &bytes[data_start..];
        let mut expected_offset = 0u64;
        let mut tensors = BTreeMap::new();
        for (name, entry) in &seen {
            validate_name(name)?;
            if entry.dtype != DTYPE_F32 {
                return Err(Error::HeaderMismatch(format!(
                    "tensor {name}: unsupported dtype {:?}",
                    entry.dtype
                )));
            }
            let count: usize = entry.shape.iter().product();
            if entry.nbytes != (count * 4) as u64 {
                return Err(Error::HeaderMismatch(format!(
                    "tensor {name}: nbytes {} does not match shape {:?}",
                    entry.nbytes, entry.shape
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::HeaderMismatch(format!(
                    "tensor {name}: offset {} breaks the lexicographic no-padding layout \
                     (expected {expected_offset})",
                    entry.offset
                )));
            }
            let end = entry.offset + entry.nbytes;
            if end > data.len() as u64 {
                return Err(Error::Truncated(format!(
                    "tensor {name}: payload [{}, {end}) exceeds data region of {} bytes",
                    entry.offset,
                    data.len()
                )));
            }
            let raw = &data[entry.offset as usize..end as usize];
            let mut values = Vec::with_capacity(count);
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("tensor {name} element {i} is {v}")));
                }
                values.push(v);
            }
            let tensor = Tensor::new(entry.shape.clone(), values).map_err(|e| match e {
                Error::InvalidTensor { reason, .. } => Error::InvalidTensor {
                    name: name.clone(),
                    reason,
                },
                other => other,
            })?;
            tensors.insert(name.clone(), tensor);
            expected_offset = end;
        }
        if expected_offset != data.len() as u64 {
            return Err(Error::HeaderMismatch(format!(
                "data region has {} bytes but tensors account for {expected_offset}",
                data.len()
            )));
        }
        Ok(Checkpoint {
            tensors,
            metadata: header.metadata,
        })
    }

    /// SHA-256 of the serialized container, hex-encoded. Canonical: invariant
    /// to the order tensors were inserted before saving.
    pub fn canonical_hash(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Bitwise equality over every tensor plus exact metadata equality.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((an, at), (bn, bt))| an == bn && at.bit_eq(bt))
    }
}

const DTYPE_F32: &str = "f32";

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::InvalidName("(empty)".to_string()));
    }
    if name.contains('\0') {
        return Err(Error::InvalidName(format!("{name:?} contains NUL")));
    }
    Ok(())
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    tensors: BTreeMap<&'a str, TensorEntry>,
    metadata: &'a BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct HeaderIn {
    tensors: TensorEntries,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize, Clone)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Header tensor map collected as raw pairs so duplicate names survive JSON
/// parsing and can be reported as `DuplicateName` instead of silently merged.
struct TensorEntries(Vec<(String, TensorEntry)>);

impl<'de> Deserialize<'de> for TensorEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct PairVisitor;
        impl<'de> Visitor<'de> for PairVisitor {
            type Value = TensorEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of tensor name to tensor entry")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut pairs = Vec::new();
                while let Some(pair) = map.next_entry::<String, TensorEntry>()? {
                    pairs.push(pair);
                }
                Ok(TensorEntries(pairs))
            }
        }
        deserializer.deserialize_map(PairVisitor)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// How the names of two checkpoints line up.
///
/// The four lists are disjoint; together they cover every name of both
/// checkpoints. `shared` holds names present in both with equal shapes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeyAlignment {
    pub shared: Vec<String>,
    pub only_a: Vec<String>,
    pub only_b: Vec<String>,
    pub shape_mismatch: Vec<String>,
}

pub fn align_keys(a: &Checkpoint, b: &Checkpoint) -> KeyAlignment {
    let mut out = KeyAlignment::default();
    for (name, ta) in a.tensors() {
        match b.get(name) {
            Some(tb) if tb.shape() == ta.shape() => out.shared.push(name.to_string()),
            Some(_) => out.shape_mismatch.push(name.to_string()),
            None => out.only_a.push(name.to_string()),
        }
    }
    for (name, _) in b.tensors() {
        if a.get(name).is_none() {
            out.only_b.push(name.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    /// Keep exactly the tensors matching any pattern.
    Keep,
    /// Drop the tensors matching any pattern, keep the rest.
    Drop,
}

/// Returns a new checkpoint with tensors selected by glob patterns.
/// Metadata is carried over unchanged.
pub fn filter_keys<S: AsRef<str>>(
    ckpt: &Checkpoint,
    patterns: &[S],
    mode: FilterMode,
) -> Result<Checkpoint> {
    let set = PatternSet::compile(patterns)?;
    let mut out = Checkpoint {
        tensors: BTreeMap::new(),
        metadata: ckpt.metadata.clone(),
    };
    for (name, tensor) in ckpt.tensors() {
        let hit = set.matches(name);
        let keep = match mode {
            FilterMode::Keep => hit,
            FilterMode::Drop => !hit,
        };
        if keep {
            out.tensors.insert(name.to_string(), tensor.clone());
        }
    }
    Ok(out)
}
