//! Single-file model container.
//!
//! Layout (little-endian):
//! `b"AREPASCK"`, `u32` format version, `u64` header length, UTF-8 JSON
//! header, `u64` blob count, then for each blob a `u64` length and its bytes.
//! Blobs are serialized parameter stores.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 8] = b"AREPASCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<H: Serialize>(header: &H, blobs: &[Vec<u8>]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(32 + json.len() + blobs.iter().map(|b| b.len() + 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
    for b in blobs {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        out.extend_from_slice(b);
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CoreError::Checkpoint("truncated file".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn u64_at(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let b = take(bytes, pos, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()) as usize)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<Vec<u8>>)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(CoreError::Checkpoint("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hl = u64_at(bytes, &mut pos)?;
    let header = serde_json::from_slice(take(bytes, &mut pos, hl)?)
        .map_err(|e| CoreError::Checkpoint(format!("header: {e}")))?;
    let n = u64_at(bytes, &mut pos)?;
    let mut blobs = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let len = u64_at(bytes, &mut pos)?;
        blobs.push(take(bytes, &mut pos, len)?.to_vec());
    }
    if pos != bytes.len() {
        return Err(CoreError::Checkpoint("trailing bytes".into()));
    }
    Ok((header, blobs))
}

pub fn write<H: Serialize>(path: &Path, header: &H, blobs: &[Vec<u8>]) -> Result<()> {
    let bytes = encode(header, blobs)?;
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<Vec<u8>>)> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        CoreError::Checkpoint(m) => CoreError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
