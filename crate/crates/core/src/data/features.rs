//! Binary per-item feature files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `b"MGSV"`            |
//! | 4      | 2    | version (`u16`)            |
//! | 6      | 2    | dtype code (`u16`, 1 = f32)|
//! | 8      | 4    | rows (`u32`)               |
//! | 12     | 4    | cols (`u32`)               |
//! | 16     | 4    | duration in seconds (`f32`)|
//! | 20     | ...  | row-major payload          |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MGSV";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;
pub const HEADER_LEN: usize = 20;
/// Width of a per-frame video token.
pub const VIDEO_DIM: usize = 512;
/// Width of a per-segment music token.
pub const MUSIC_DIM: usize = 768;

/// A time-ordered `[n, w]` token matrix with the source media duration.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor<f32>,
    pub duration_sec: f32,
}

impl TokenSequence {
    pub fn new(tokens: Tensor<f32>, duration_sec: f32) -> Result<Self> {
        validate(&tokens, duration_sec)?;
        Ok(TokenSequence { tokens, duration_sec })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

fn validate(tokens: &Tensor<f32>, duration: f32) -> Result<()> {
    let sh = tokens.shape();
    if sh.len() != 2 || sh[0] == 0 {
        return Err(Error::Format(format!("token matrix {:?} must be [rows >= 1, cols]", sh)));
    }
    if sh[1] != VIDEO_DIM && sh[1] != MUSIC_DIM {
        return Err(Error::Format(format!("token width {} is neither {VIDEO_DIM} nor {MUSIC_DIM}", sh[1])));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Format(format!("duration {duration} must be positive")));
    }
    if !tokens.all_finite() {
        return Err(Error::Format("non-finite token value".into()));
    }
    Ok(())
}

pub fn encode_features(seq: &TokenSequence) -> Result<Vec<u8>> {
    validate(&seq.tokens, seq.duration_sec)?;
    let (rows, cols) = (seq.tokens.shape()[0], seq.tokens.shape()[1]);
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * rows * cols);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    buf.extend_from_slice(&seq.duration_sec.to_le_bytes());
    for v in seq.tokens.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_features(bytes: &[u8]) -> Result<TokenSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = u16_at(6);
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let (rows, cols) = (u32_at(8) as usize, u32_at(12) as usize);
    let duration = f32::from_bits(u32_at(16));
    let want = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != want {
        return Err(Error::Format(format!("payload is {} bytes, header implies {want}", payload.len())));
    }
    let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let tokens = Tensor::new([rows, cols], data)?;
    validate(&tokens, duration)?;
    Ok(TokenSequence { tokens, duration_sec: duration })
}

pub fn write_features(path: &Path, seq: &TokenSequence) -> Result<()> {
    let bytes = encode_features(seq)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<TokenSequence> {
    let bytes = fs::read(path)?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
