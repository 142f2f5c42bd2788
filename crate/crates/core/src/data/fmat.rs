//! FMAT binary feature files.
//!
//! Layout (little-endian): `"FMAT"`, `u32` version (1), `u32` T, `u32` D,
//! then `T·D` row-major `f32` values. Values are widened to `f64` on read
//! and rounded to `f32` on write.

use std::fs;
use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"FMAT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(x: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * x.frames().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(x.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(x.dim() as u32).to_le_bytes());
    for &v in x.frames().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated header"))
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"FMAT\""));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let t = read_u32(bytes, 8)? as usize;
    let d = read_u32(bytes, 12)? as usize;
    let n = t
        .checked_mul(d)
        .ok_or_else(|| Error::format(8, "frame count overflows"))?;
    let body = &bytes[HEADER_LEN.min(bytes.len())..];
    if body.len() != 4 * n {
        let msg = if body.len() < 4 * n { "truncated payload" } else { "trailing bytes after payload" };
        return Err(Error::format(
            (HEADER_LEN + body.len().min(4 * n)) as u64,
            format!("{msg}: header declares {t}×{d} values, found {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let frames = Tensor::matrix(t, d, data)?;
    FeatureSequence::new(frames).map_err(|e| Error::format(HEADER_LEN as u64, e.to_string()))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    decode_features(&fs::read(path)?)
}

pub fn write_features(path: &Path, x: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_features(x))?;
    Ok(())
}
