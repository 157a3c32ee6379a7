//! Binary feature files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `BAFV`                   |
//! | 4      | 4    | version, `u32` = 1             |
//! | 8      | 4    | `n_frames`, `u32`              |
//! | 12     | 4    | `dim`, `u32`                   |
//! | 16     | 4·n·dim | frames, row-major `f32`     |
//!
//! Values are widened to `f64` on load.

use std::fs;
use std::path::Path;

use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::Vector;

pub const MAGIC: &[u8; 4] = b"BAFV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_features(f: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.len() * f.dim());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(f.len() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for frame in &f.frames {
        for v in frame.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

/// Parses a feature file image; `path` only labels errors.
pub fn decode_features(id: &str, bytes: &[u8], path: &Path) -> Result<FeatureSequence> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected BAFV".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let n = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    if n == 0 || dim == 0 {
        return Err(fail(8, format!("empty feature block ({n} frames of dim {dim})")));
    }
    let want = n
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| fail(8, "frame count overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != want {
        return Err(fail(
            HEADER_LEN + payload.len().min(want),
            format!(
                "payload has {} bytes, header implies {want} ({n} x {dim} floats)",
                payload.len()
            ),
        ));
    }
    let mut frames = Vec::with_capacity(n);
    for (t, chunk) in payload.chunks_exact(4 * dim).enumerate() {
        let mut frame = Vec::with_capacity(dim);
        for (j, b) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(b.try_into().unwrap());
            if !v.is_finite() {
                return Err(fail(
                    HEADER_LEN + 4 * (t * dim + j),
                    "non-finite feature value".into(),
                ));
            }
            frame.push(f64::from(v));
        }
        frames.push(Vector::from(frame));
    }
    FeatureSequence::new(id, frames)
}

/// Loads a feature file; the video id is the file stem.
pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_features(&id, &bytes, path)
}

pub fn save_features(path: &Path, f: &FeatureSequence) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}
