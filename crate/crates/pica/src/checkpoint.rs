//! Named-tensor checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"PICA1"
//! u32    entry count
//! entry* u32 name_len, name bytes (UTF-8),
//!        u32 rank, rank x u32 extents,
//!        f32 x numel payload
//! ```
//!
//! Values are stored as `f32` regardless of the build's scalar type, so an
//! `f32` build round-trips bit-exactly. Trailing bytes, truncation, or
//! malformed headers are errors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diff::Tensor;
use crate::Real;

pub const MAGIC: &[u8; 5] = b"PICA1";

const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_NUMEL: u64 = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T, CheckpointError> {
    Err(CheckpointError::Format(msg.into()))
}

/// Serialize entries in order.
pub fn save(path: &Path, entries: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Deserialize all entries, preserving order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return fmt_err(format!("truncated at byte {} (need {} more)", *pos, n));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32, CheckpointError> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };

    if take(&mut pos, MAGIC.len())? != MAGIC {
        return fmt_err("bad magic");
    }
    let count = take_u32(&mut pos)?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = take_u32(&mut pos)?;
        if name_len > MAX_NAME {
            return fmt_err(format!("entry {}: name length {}", i, name_len));
        }
        let name = std::str::from_utf8(take(&mut pos, name_len as usize)?)
            .map_err(|_| CheckpointError::Format(format!("entry {}: name not UTF-8", i)))?
            .to_string();
        let rank = take_u32(&mut pos)?;
        if rank > MAX_RANK {
            return fmt_err(format!("entry {} ({}): rank {}", i, name, rank));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = take_u32(&mut pos)? as u64;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_NUMEL {
            return fmt_err(format!("entry {} ({}): {} elements", i, name, numel));
        }
        let payload = take(&mut pos, numel as usize * 4)?;
        let data: Vec<Real> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
            .collect();
        out.push((name, Tensor::new(data, &shape)));
    }
    if pos != bytes.len() {
        return fmt_err(format!("{} trailing bytes", bytes.len() - pos));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn sha256_hex_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
