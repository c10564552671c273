//! `SELDFEAT` container: little-endian header
//! `{magic[8], version u32, channels u32, frames u32, mels u32}` followed by
//! float32 data in `[c][t][f]` order.

use std::io::{Read, Write};
use std::path::Path;

use super::FeatureTensor;
use crate::error::{Result, SeldError};

pub const FEATURE_MAGIC: &[u8; 8] = b"SELDFEAT";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(path: &Path, feat: &FeatureTensor) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + feat.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION,
        feat.channels as u32,
        feat.frames as u32,
        feat.mels as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &feat.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureTensor> {
    let malformed = |reason: &str| SeldError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != FEATURE_MAGIC {
        return Err(malformed("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    if word(0) != FEATURE_VERSION {
        return Err(malformed("unsupported version"));
    }
    let (channels, frames, mels) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = channels * frames * mels;
    if bytes.len() != 24 + 4 * n {
        return Err(malformed("payload length does not match header"));
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureTensor {
        channels,
        frames,
        mels,
        data,
        frame_hop_s: 0.020,
        window_s: 0.040,
    })
}
