//! `BRTC` container: versioned header plus a little-endian `f32` payload
//! guarded by a 64-bit FNV-1a checksum.
//!
//! Layout:
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 4     | magic `BRTC`                           |
//! | 4     | format version (u32 LE)                |
//! | 4     | kind (u32 LE): 1 inversion, 2 weights  |
//! | 4     | header length `h` (u32 LE)             |
//! | h     | header, UTF-8 JSON                     |
//! | 8     | payload length `n` in floats (u64 LE)  |
//! | 4n    | payload, `f32` LE                      |
//! | 8     | FNV-1a 64 of the payload bytes (u64 LE)|

use std::path::Path;

use baret_core::backbone::toy::Fnv64;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"BRTC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Inversion = 1,
    Weights = 2,
}

impl Kind {
    fn from_u32(v: u32) -> Option<Kind> {
        match v {
            1 => Some(Kind::Inversion),
            2 => Some(Kind::Weights),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, not a cache file")]
    Magic { found: [u8; 4] },
    #[error("format version {found} is not supported (expected {supported}); regenerate the file with this build")]
    Version { found: u32, supported: u32 },
    #[error("file holds kind {found}, expected {expected:?}")]
    Kind { expected: Kind, found: u32 },
    #[error("payload checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("bad header: {0}")]
    Header(String),
}

impl CacheError {
    /// Stable numeric code per error class.
    pub fn code(&self) -> u8 {
        match self {
            CacheError::Io(_) => 10,
            CacheError::Magic { .. } => 11,
            CacheError::Version { .. } => 12,
            CacheError::Checksum { .. } => 13,
            CacheError::Truncated { .. } => 14,
            CacheError::Kind { .. } => 15,
            CacheError::Header(_) => 16,
        }
    }
}

pub fn checksum(payload: &[u8]) -> u64 {
    let mut h = Fnv64::new();
    h.write(payload);
    h.finish()
}

/// Serializes a header and payload into container bytes.
pub fn encode<H: Serialize>(kind: Kind, header: &H, payload: &[f32]) -> Result<Vec<u8>, CacheError> {
    let header = serde_json::to_vec(header).map_err(|e| CacheError::Header(e.to_string()))?;
    let header_len =
        u32::try_from(header.len()).map_err(|_| CacheError::Header("header too large".into()))?;
    let mut out = Vec::with_capacity(32 + header.len() + 4 * payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    let start = out.len();
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let sum = checksum(&out[start..]);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CacheError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CacheError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CacheError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CacheError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses container bytes. The header is validated before the payload is
/// read, and the payload is checked against its checksum.
pub fn decode<H: DeserializeOwned>(bytes: &[u8], kind: Kind) -> Result<(H, Vec<f32>), CacheError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CacheError::Magic { found: magic });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CacheError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let found = r.u32()?;
    if Kind::from_u32(found) != Some(kind) {
        return Err(CacheError::Kind {
            expected: kind,
            found,
        });
    }
    let header_len = r.u32()? as usize;
    let header: H =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| CacheError::Header(e.to_string()))?;
    let n = usize::try_from(r.u64()?).map_err(|_| CacheError::Header("payload too large".into()))?;
    let bytes_needed = n
        .checked_mul(4)
        .ok_or_else(|| CacheError::Header("payload too large".into()))?;
    let raw = r.take(bytes_needed)?;
    let stored = r.u64()?;
    let computed = checksum(raw);
    if stored != computed {
        return Err(CacheError::Checksum { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(CacheError::Header(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, payload))
}

pub fn write_file<H: Serialize>(path: &Path, kind: Kind, header: &H, payload: &[f32]) -> Result<(), CacheError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(kind, header, payload)?)?;
    Ok(())
}

pub fn read_file<H: DeserializeOwned>(path: &Path, kind: Kind) -> Result<(H, Vec<f32>), CacheError> {
    decode(&std::fs::read(path)?, kind)
}
