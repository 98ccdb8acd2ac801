//! Binary container for named tensors plus a JSON manifest.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   magic "FTNC"
//! 4   version u16
//! 6   endianness u8 (0 = little)
//! 7   reserved u8 (0)
//! 8   manifest_len u32
//! 12  tensor_count u32
//! 16  index_len u64
//! 24  payload_len u64
//! 32  sha256 of manifest ‖ index ‖ payload
//! 64  manifest (UTF-8 JSON)
//!     index: per tensor
//!       name_len u16, name bytes, precision u8 (0 = f32, 1 = f64),
//!       rank u8, dims u64 × rank, offset u64 (into payload)
//!     payload: raw IEEE-754 values
//! ```
//!
//! The digest is checked before anything else is parsed, so truncation and
//! bit flips both surface as [`CheckpointError::DigestMismatch`].
//!
//! Saves go through a temp sibling and a rename. Writers that train into a
//! file first take a [`CheckpointLock`] on it.

use std::collections::HashSet;
use std::fs::{File, OpenOptions, TryLockError};
use std::path::{Path, PathBuf};

use ftn_core::{Precision, Tensor};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FTNC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("[E11] not a checkpoint: magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("[E12] unsupported checkpoint version {found} (expected {VERSION})")]
    BadVersion { found: u16 },
    #[error("[E13] checkpoint integrity check failed: {0}")]
    DigestMismatch(String),
    #[error("[E14] malformed checkpoint: {0}")]
    Malformed(String),
    #[error("[E15] {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("[E16] {path} is being written by another process")]
    Locked { path: String },
}

impl CheckpointError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadMagic { .. } => 11,
            CheckpointError::BadVersion { .. } => 12,
            CheckpointError::DigestMismatch(_) => 13,
            CheckpointError::Malformed(_) => 14,
            CheckpointError::Io { .. } => 15,
            CheckpointError::Locked { .. } => 16,
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            TensorData::F32(_) => Precision::Single,
            TensorData::F64(_) => Precision::Double,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    /// Bitwise equality, so NaN payloads and signed zeros count.
    pub fn bit_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => a.bit_eq(b),
            (TensorData::F64(a), TensorData::F64(b)) => a.bit_eq(b),
            _ => false,
        }
    }
}

/// Manifest text plus tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub manifest: String,
    pub tensors: Vec<(String, TensorData)>,
}

impl Container {
    pub fn new(manifest: String) -> Self {
        Container { manifest, tensors: Vec::new() }
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), TensorData::F32(t)));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.tensors.push((name.into(), TensorData::F64(t)));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(TensorData::F32(t)) => Ok(t),
            Some(_) => Err(CheckpointError::Malformed(format!("`{name}` is not single precision"))),
            None => Err(CheckpointError::Malformed(format!("missing tensor `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = Vec::new();
        let mut payload = Vec::new();
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")));
            }
            let nb = name.as_bytes();
            let name_len = u16::try_from(nb.len())
                .map_err(|_| CheckpointError::Malformed(format!("tensor name too long: {}", nb.len())))?;
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| CheckpointError::Malformed(format!("`{name}` has too many dims")))?;
            index.extend_from_slice(&name_len.to_le_bytes());
            index.extend_from_slice(nb);
            index.push(match t.precision() {
                Precision::Single => 0,
                Precision::Double => 1,
            });
            index.push(rank);
            for &d in t.shape() {
                index.extend_from_slice(&(d as u64).to_le_bytes());
            }
            index.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            t.write_le(&mut payload);
        }
        let manifest = self.manifest.as_bytes();
        let manifest_len = u32::try_from(manifest.len())
            .map_err(|_| CheckpointError::Malformed("manifest too large".into()))?;
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| CheckpointError::Malformed("too many tensors".into()))?;
        let mut h = Sha256::new();
        h.update(manifest);
        h.update(&index);
        h.update(&payload);
        let digest = h.finalize();

        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + index.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(0);
        out.push(0);
        out.extend_from_slice(&manifest_len.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&digest);
        out.extend_from_slice(manifest);
        out.extend_from_slice(&index);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || CheckpointError::DigestMismatch(format!("file truncated at {} bytes", bytes.len()));
        if bytes.len() < 4 {
            return if MAGIC.starts_with(bytes) {
                Err(truncated())
            } else {
                let mut found = [0u8; 4];
                found[..bytes.len()].copy_from_slice(bytes);
                Err(CheckpointError::BadMagic { found })
            };
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != MAGIC {
            return Err(CheckpointError::BadMagic { found });
        }
        if bytes.len() < 6 {
            return Err(truncated());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CheckpointError::BadVersion { found: version });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated());
        }
        if bytes[6] != 0 {
            return Err(CheckpointError::Malformed(format!("unknown endianness tag {}", bytes[6])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let manifest_len = u32_at(8);
        let count = u32_at(12);
        let index_len = u64_at(16);
        let payload_len = u64_at(24);
        let body = (manifest_len as u64)
            .checked_add(index_len)
            .and_then(|v| v.checked_add(payload_len))
            .ok_or_else(|| CheckpointError::Malformed("section lengths overflow".into()))?;
        let have = (bytes.len() - HEADER_LEN) as u64;
        if have < body {
            return Err(truncated());
        }
        if have > body {
            return Err(CheckpointError::DigestMismatch(format!("{} trailing bytes", have - body)));
        }
        let (index_len, payload_len) = (index_len as usize, payload_len as usize);
        let rest = &bytes[HEADER_LEN..];
        if Sha256::digest(rest)[..] != bytes[32..64] {
            return Err(CheckpointError::DigestMismatch("sha256 does not match contents".into()));
        }
        let manifest = std::str::from_utf8(&rest[..manifest_len])
            .map_err(|e| CheckpointError::Malformed(format!("manifest is not UTF-8: {e}")))?
            .to_string();
        let index = &rest[manifest_len..manifest_len + index_len];
        let payload = &rest[manifest_len + index_len..];
        debug_assert_eq!(payload.len(), payload_len);

        let mut r = Reader { buf: index, pos: 0 };
        let mut tensors = Vec::with_capacity(count);
        let mut names = HashSet::new();
        let mut next_free = 0usize;
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Malformed(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")));
            }
            let precision = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| CheckpointError::Malformed(format!("`{name}`: dim {d}")))?);
            }
            let offset = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("`{name}`: element count overflows")))?;
            let width = match precision {
                0 => 4,
                1 => 8,
                p => return Err(CheckpointError::Malformed(format!("`{name}`: unknown precision tag {p}"))),
            };
            if offset < next_free {
                return Err(CheckpointError::Malformed(format!("`{name}`: overlapping or unordered offset {offset}")));
            }
            let end = n
                .checked_mul(width)
                .and_then(|b| b.checked_add(offset))
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| CheckpointError::Malformed(format!("`{name}`: extends past payload")))?;
            let raw = &payload[offset..end];
            let data = if width == 4 {
                let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                TensorData::F32(Tensor::from_vec(&shape, v).map_err(|e| CheckpointError::Malformed(e.to_string()))?)
            } else {
                let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                TensorData::F64(Tensor::from_vec(&shape, v).map_err(|e| CheckpointError::Malformed(e.to_string()))?)
            };
            next_free = end;
            tensors.push((name, data));
        }
        if r.pos != index.len() {
            return Err(CheckpointError::Malformed(format!("{} unread index bytes", index.len() - r.pos)));
        }
        Ok(Container { manifest, tensors })
    }

    /// Writes a sibling temp file and renames it over `path`, so readers
    /// never observe a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let tmp = sibling(path, &format!("tmp-{}", std::process::id()));
        std::fs::write(&tmp, bytes).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            io(e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    path.with_file_name(name)
}

/// Advisory exclusive lock on `<checkpoint>.lock`, held until dropped. The
/// lock file itself is left in place: removing it would let a second
/// process lock a fresh inode while the first still holds the old one.
#[derive(Debug)]
pub struct CheckpointLock {
    _file: File,
}

impl CheckpointLock {
    pub fn acquire(path: &Path) -> Result<Self> {
        let lock = sibling(path, "lock");
        let io = |source| CheckpointError::Io { path: lock.display().to_string(), source };
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&lock).map_err(io)?;
        match file.try_lock() {
            Ok(()) => Ok(CheckpointLock { _file: file }),
            Err(TryLockError::WouldBlock) => Err(CheckpointError::Locked { path: path.display().to_string() }),
            Err(TryLockError::Error(e)) => Err(io(e)),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("index ends mid-entry".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
