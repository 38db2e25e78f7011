//! Binary checkpoint format (version 1), all integers little-endian:
//!
//! | bytes | field                                         |
//! |-------|-----------------------------------------------|
//! | 8     | magic `ULABCKPT`                              |
//! | 4     | format version (`u32`, currently 1)           |
//! | 32    | SHA-256 digest of the model config            |
//! | 8     | parameter count `n` (`u64`)                   |
//! | 4·n   | parameters in flat order as `f32`             |
//!
//! Names and shapes are not stored; they are rebuilt from the config the
//! digest identifies.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::ParamStore;

pub const MAGIC: &[u8; 8] = b"ULABCKPT";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(digest: &[u8; 32], params: &ParamStore<f32>) -> Vec<u8> {
    let n = params.numel();
    let mut buf = Vec::with_capacity(52 + 4 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(digest);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for t in params.tensors() {
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Decodes into `template`'s layout; returns the stored config digest.
pub fn decode_checkpoint(bytes: &[u8], template: &ParamStore<f32>) -> Result<([u8; 32], ParamStore<f32>)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut u4 = [0u8; 4];
    r.read_exact(&mut u4).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let version = u32::from_le_bytes(u4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let mut u8b = [0u8; 8];
    r.read_exact(&mut u8b).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let n = u64::from_le_bytes(u8b) as usize;
    if n != template.numel() {
        return Err(Error::Checkpoint(format!("holds {n} parameters, config expects {}", template.numel())));
    }
    if r.len() != 4 * n {
        return Err(Error::Checkpoint(format!("payload is {} bytes, expected {}", r.len(), 4 * n)));
    }
    let flat: Vec<f32> = r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((digest, template.unflatten(&flat)?))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("part")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, digest: &[u8; 32], params: &ParamStore<f32>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(digest, params))
}

pub fn load_checkpoint(path: &Path, template: &ParamStore<f32>) -> Result<([u8; 32], ParamStore<f32>)> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, template)
}
