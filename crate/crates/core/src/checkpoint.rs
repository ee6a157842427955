//! Binary tensor container: magic `HSTE`, little-endian `u32` version and
//! header length, a JSON header listing every tensor, then little-endian
//! single-precision payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Array, ParamSet};

pub const MAGIC: &[u8; 4] = b"HSTE";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Moment1,
    Moment2,
    Rng,
    Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
    pub kind: TensorKind,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// An in-memory container: ordered named tensors plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, TensorKind, Array)>,
    pub meta: serde_json::Value,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format(detail.into())
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { tensors: Vec::new(), meta }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: TensorKind, value: Array) {
        self.tensors.push((name.into(), kind, value));
    }

    /// Add every entry of `set` as `prefix + name`.
    pub fn push_set(&mut self, prefix: &str, kind: TensorKind, set: &ParamSet) {
        for (name, a) in set.iter() {
            self.push(format!("{prefix}{name}"), kind, a.clone());
        }
    }

    pub fn get(&self, name: &str, kind: TensorKind) -> Result<&Array> {
        self.tensors
            .iter()
            .find(|(n, k, _)| n == name && *k == kind)
            .map(|(_, _, a)| a)
            .ok_or_else(|| format_err(format!("checkpoint has no {kind:?} tensor {name}")))
    }

    /// Every entry of `kind` whose name starts with `prefix`, prefix removed,
    /// in file order.
    pub fn take_set(&self, prefix: &str, kind: TensorKind) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for (name, k, a) in &self.tensors {
            if *k == kind {
                if let Some(rest) = name.strip_prefix(prefix) {
                    set.insert(rest, a.clone()).map_err(|e| format_err(e.to_string()))?;
                }
            }
        }
        Ok(set)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, kind, a) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: a.shape().to_vec(), offset, kind: *kind });
            offset += 4 * a.len() as u64;
        }
        let header = serde_json::to_vec(&Header { tensors: entries, meta: self.meta.clone() })
            .map_err(|e| format_err(format!("header encoding: {e}")))?;
        let header_len = u32::try_from(header.len()).map_err(|_| format_err("header too large"))?;
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, a) in &self.tensors {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let payload_start = 12usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| format_err("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| format_err(format!("header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.offset != expected {
                return Err(format_err(format!("tensor {} at offset {} (expected {expected})", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let end = expected + 4 * n as u64;
            if end > payload.len() as u64 {
                return Err(format_err(format!("truncated payload in tensor {}", e.name)));
            }
            let data = payload[expected as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, e.kind, Array::new(&e.shape, data)?));
            expected = end;
        }
        if expected != payload.len() as u64 {
            return Err(format_err(format!("payload has {} bytes, header describes {expected}", payload.len())));
        }
        Ok(Self { tensors, meta: header.meta })
    }

    /// Write via a temporary sibling and rename, so a crash never leaves a
    /// partially written file under `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Write `bytes` to a temporary file beside `path`, sync, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().ok_or_else(|| Error::Io(std::io::Error::other("path has no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Integers are stored as 16-bit chunks, each exactly representable in f32.
pub fn encode_u64(v: u64) -> Array {
    Array::from_fn(&[4], |i| ((v >> (16 * i)) & 0xffff) as f32)
}

pub fn decode_u64(a: &Array) -> Result<u64> {
    if a.len() != 4 {
        return Err(format_err(format!("integer tensor has {} chunks, expected 4", a.len())));
    }
    a.data().iter().enumerate().try_fold(0u64, |acc, (i, &c)| {
        if c.fract() != 0.0 || !(0.0..65536.0).contains(&c) {
            return Err(format_err(format!("bad integer chunk {c}")));
        }
        Ok(acc | ((c as u64) << (16 * i)))
    })
}

pub fn encode_u128(v: u128) -> Array {
    let (lo, hi) = (encode_u64(v as u64), encode_u64((v >> 64) as u64));
    Array::from_fn(&[8], |i| if i < 4 { lo.data()[i] } else { hi.data()[i - 4] })
}

pub fn decode_u128(a: &Array) -> Result<u128> {
    if a.len() != 8 {
        return Err(format_err(format!("integer tensor has {} chunks, expected 8", a.len())));
    }
    let lo = decode_u64(&Array::new(&[4], a.data()[..4].to_vec())?)?;
    let hi = decode_u64(&Array::new(&[4], a.data()[4..].to_vec())?)?;
    Ok(lo as u128 | ((hi as u128) << 64))
}
