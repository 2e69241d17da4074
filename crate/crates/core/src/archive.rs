//! Binary container shared by checkpoints and resume state: an 8-byte magic,
//! a `u32` version, a length-prefixed JSON header, a blob length table and
//! the blobs themselves as little-endian `f32`. Files are written atomically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes through a sibling temporary file and a rename so readers never
/// observe a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn write_archive<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    version: u32,
    header: &H,
    blobs: &[&[f32]],
) -> Result<()> {
    let header = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload: usize = blobs.iter().map(|b| b.len()).sum();
    let mut bytes = Vec::with_capacity(28 + header.len() + 8 * blobs.len() + 4 * payload);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&version.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
    for b in blobs {
        bytes.extend_from_slice(&(b.len() as u64).to_le_bytes());
    }
    for b in blobs {
        for v in *b {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub(crate) fn read_archive<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 8],
    version: u32,
) -> Result<(H, Vec<Vec<f32>>)> {
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let bytes = fs::read(path).map_err(|e| bad(&e.to_string()))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8) != Some(magic.as_slice()) {
        return Err(bad("unrecognised file type"));
    }
    let found = cur
        .take(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| bad("truncated"))?;
    if found != version {
        return Err(bad(&format!("unsupported version {found}")));
    }
    let header_len = cur.u64().ok_or_else(|| bad("truncated"))? as usize;
    let header = cur.take(header_len).ok_or_else(|| bad("truncated header"))?;
    let header: H = serde_json::from_slice(header).map_err(|e| bad(&format!("header: {e}")))?;
    let count = cur.u64().ok_or_else(|| bad("truncated"))? as usize;
    let lens: Vec<usize> = (0..count)
        .map(|_| cur.u64().map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| bad("truncated blob table"))?;
    let mut blobs = Vec::with_capacity(count);
    for len in lens {
        let raw = cur
            .take(len.checked_mul(4).ok_or_else(|| bad("blob too large"))?)
            .ok_or_else(|| bad("truncated blob"))?;
        blobs.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, blobs))
}
