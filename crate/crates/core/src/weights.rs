//! Named parameter storage and the LUSW binary weight file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "LUSW"
//! version    u32      1
//! count      u32      number of tensors
//! per tensor:
//!   name_len u16
//!   name     name_len bytes, UTF-8
//!   ndim     u8
//!   extents  ndim x u32
//!   payload  product(extents) x f32, row-major
//! crc32      u32      IEEE CRC-32 over every preceding byte
//! ```
//!
//! The checksum is verified before anything else is interpreted, so any
//! corruption of a saved file surfaces as [`WeightsError::ChecksumMismatch`].

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"LUSW";
pub const FORMAT_VERSION: u32 = 1;
const MIN_FILE_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("weights I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?} (not a LUSW file)")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("truncated weight file: {0}")]
    Truncated(String),
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("tensor {name:?}: {source}")]
    Tensor { name: String, source: TensorError },
}

/// Ordered collection of uniquely named tensors.
///
/// Freeze flags are session state: they never reach the file.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    frozen: BTreeSet<String>,
}

impl PartialEq for WeightStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), WeightsError> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(WeightsError::InvalidName(name));
        }
        if self.index.contains_key(&name) {
            return Err(WeightsError::DuplicateName(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), &mut *t))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if frozen {
            if self.contains(name) {
                self.frozen.insert(name.to_string());
            }
        } else {
            self.frozen.remove(name);
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    /// Same names and bit patterns in the same order.
    pub fn bit_eq(&self, other: &WeightStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        decode(bytes)
    }
}

pub fn encode(store: &WeightStore) -> Vec<u8> {
    let payload: usize = store
        .entries
        .iter()
        .map(|(n, t)| 2 + n.len() + 1 + 4 * t.rank() + 4 * t.len())
        .sum();
    let mut out = Vec::with_capacity(MIN_FILE_LEN + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for (name, t) in &store.entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightsError> {
        if self.buf.len() - self.pos < n {
            return Err(WeightsError::Truncated(format!(
                "need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, WeightsError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightStore, WeightsError> {
    if bytes.len() < MIN_FILE_LEN {
        return Err(WeightsError::Truncated(format!(
            "{} bytes, minimum is {MIN_FILE_LEN}",
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(WeightsError::ChecksumMismatch { stored, computed });
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(WeightsError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(WeightsError::UnsupportedVersion(version));
    }
    let count = cur.u32("tensor count")?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| WeightsError::Malformed(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let ndim = cur.u8("rank")? as usize;
        if ndim == 0 || ndim > MAX_RANK {
            return Err(WeightsError::Malformed(format!("tensor {name:?} has rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32("extent")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| WeightsError::Malformed(format!("tensor {name:?} dims {dims:?} overflow")))?;
        let raw = cur.take(n, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|source| WeightsError::Tensor {
            name: name.clone(),
            source,
        })?;
        store.insert(name, tensor)?;
    }
    if cur.pos != body.len() {
        return Err(WeightsError::Malformed(format!(
            "{} trailing bytes after last tensor",
            body.len() - cur.pos
        )));
    }
    Ok(store)
}

/// Writes `store` to `path`, returning the byte count.
pub fn save(store: &WeightStore, path: impl AsRef<Path>) -> Result<usize, WeightsError> {
    let bytes = encode(store);
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load(path: impl AsRef<Path>) -> Result<WeightStore, WeightsError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_b() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("b", Tensor::zeros(&[2])).unwrap();
        s
    }

    #[test]
    fn empty_store_is_16_bytes() {
        let bytes = encode(&WeightStore::new());
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..4], b"LUSW");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
    }

    #[test]
    fn single_tensor_layout() {
        let bytes = encode(&single_b());
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'b');
        assert_eq!(bytes[15], 1);
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &[0u8; 8]);
        let crc = crc32fast::hash(&bytes[..28]);
        assert_eq!(&bytes[28..], &crc.to_le_bytes());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.lusw");
        let mut s = single_b();
        s.insert("conv1_1/kernels", Tensor::filled(&[3, 3, 1, 2], -0.5)).unwrap();
        let n = save(&s, &path).unwrap();
        assert_eq!(n as u64, std::fs::metadata(&path).unwrap().len());
        let back = load(&path).unwrap();
        assert!(back.bit_eq(&s));
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["b", "conv1_1/kernels"]);
    }

    #[test]
    fn flipped_last_byte_is_checksum_error() {
        let mut bytes = encode(&single_b());
        *bytes.last_mut().unwrap() ^= 0xff;
        assert!(matches!(decode(&bytes), Err(WeightsError::ChecksumMismatch { .. })));
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn version_gate() {
        let mut bytes = encode(&single_b());
        bytes.truncate(bytes.len() - 4);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = decode(&reseal(bytes)).unwrap_err();
        assert_eq!(err.to_string(), "unsupported version 2");
    }

    #[test]
    fn bad_magic_with_valid_checksum() {
        let mut bytes = encode(&single_b());
        bytes.truncate(bytes.len() - 4);
        bytes[0] = b'X';
        assert!(matches!(decode(&reseal(bytes)), Err(WeightsError::BadMagic(_))));
    }

    #[test]
    fn truncation() {
        assert!(matches!(decode(b"LUSW"), Err(WeightsError::Truncated(_))));
        // Structurally short body that still carries a valid checksum.
        let mut bytes = encode(&single_b());
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(decode(&reseal(bytes)), Err(WeightsError::Truncated(_))));
    }

    #[test]
    fn store_rejects_duplicates_and_empty_names() {
        let mut s = single_b();
        assert!(matches!(s.insert("b", Tensor::zeros(&[1])), Err(WeightsError::DuplicateName(_))));
        assert!(matches!(s.insert("", Tensor::zeros(&[1])), Err(WeightsError::InvalidName(_))));
    }

    #[test]
    fn freeze_flags_not_persisted() {
        let mut s = single_b();
        s.set_frozen("b", true);
        assert!(s.is_frozen("b"));
        let back = decode(&encode(&s)).unwrap();
        assert!(!back.is_frozen("b"));
        assert_eq!(back, s);
    }
}
