//! "CTT v1" binary tensor files: magic `CTT1`, a `u8` rank, `rank` little-endian
//! `u32` dimensions, then the row-major little-endian `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CTT1";

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * tensor.rank() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a CTT buffer. `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(fail("missing CTT1 magic"));
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(fail("rank 0"));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated header"));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail("dimension product overflows"))?;
    let payload = &bytes[header..];
    if payload.len() != count * 4 {
        return Err(fail(&format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data).map_err(|e| fail(&e.to_string()))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes through a sibling temp file and a rename.
pub fn write(path: &Path, tensor: &Tensor) -> Result<()> {
    crate::io::write_atomic(path, &encode(tensor))
}
