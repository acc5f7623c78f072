//! Raw little-endian checkpoint files for model vectors: a 16-byte header
//! (magic, version, entry count) followed by the parameters as f64 words.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: u32 = 0x4D56_4543;
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic 0x{0:08X}")]
    BadMagic(u32),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: expected {expected} parameters, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_checkpoint(path: &Path, params: &[f64]) -> Result<(), CheckpointError> {
    let mut f = File::create(path)?;
    f.write_all(&MAGIC.to_le_bytes())?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        f.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<f64>, CheckpointError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated {
            expected: 0,
            found: bytes.len() as u64,
        });
    }
    let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[16..];
    if body.len() as u64 != count * 8 {
        return Err(CheckpointError::Truncated {
            expected: count,
            found: body.len() as u64 / 8,
        });
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

// ---------------------------------------------------------------------------
