//! Checkpoint files: named f64 tensors in a little-endian binary layout.
//!
//! Layout: 8-byte magic, u32 version, u64 entry count, then per entry a
//! u32 name length + UTF-8 name, u32 rank, u64 dims, and the values as raw
//! f64 bits. Values round-trip bit-exactly. The reader never panics on
//! malformed bytes; every defect maps to a format error.

use std::fs;
use std::path::Path;

use crate::autodiff::tensor::Tensor;
use crate::bytes::Cursor;
use crate::error::Result;

const MAGIC: &[u8; 8] = b"TPTCKPT\0";
const VERSION: u32 = 1;
const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_ELEMENTS: usize = 1 << 27;

pub fn write_tensors(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    parse_tensors(&bytes)
}

/// Decode a checkpoint from raw bytes.
pub fn parse_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor::new(bytes, "checkpoint");
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(cur.err("bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(cur.err(format!("unsupported version {version}")));
    }
    let count = cur.u64()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = cur.u32()?;
        let name_len = cur.usize_capped(name_len as u64, MAX_NAME_LEN, "name length")?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| cur.err("name is not UTF-8"))?
            .to_string();
        let rank = cur.u32()?;
        let rank = cur.usize_capped(rank as u64, MAX_RANK, "rank")?;
        let mut shape = Vec::with_capacity(rank);
        let mut elements = 1usize;
        for _ in 0..rank {
            let d = cur.u64()?;
            let d = cur.usize_capped(d, MAX_ELEMENTS, "dimension")?;
            if d == 0 {
                return Err(cur.err("zero-extent dimension"));
            }
            elements = elements
                .checked_mul(d)
                .filter(|&e| e <= MAX_ELEMENTS)
                .ok_or_else(|| cur.err("element count too large"))?;
            shape.push(d);
        }
        if cur.remaining() < elements * 8 {
            return Err(cur.err("truncated tensor data"));
        }
        let mut data = Vec::with_capacity(elements);
        for _ in 0..elements {
            data.push(cur.f64()?);
        }
        let tensor = Tensor::new(shape, data).map_err(|e| cur.err(e.to_string()))?;
        entries.push((name, tensor));
    }
    if cur.remaining() != 0 {
        return Err(cur.err("trailing bytes after last tensor"));
    }
    Ok(entries)
}
