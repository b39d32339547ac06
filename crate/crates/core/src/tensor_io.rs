//! Binary tensor files.
//!
//! Layout: `b"MSRT"`, version byte `0x01`, rank byte, `rank` little-endian
//! `u32` dimensions, then the row-major payload as little-endian `f32`.
//! Tensors of rank below four are read with leading unit dimensions.

use std::fs;
use std::path::Path;

use crate::error::{Error, ParseError, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MSRT";
pub const VERSION: u8 = 0x01;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let dims = t.shape().0;
    let mut out = Vec::with_capacity(6 + 16 + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>, ParseError> {
    if bytes.is_empty() {
        return Err(ParseError::Empty);
    }
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ParseError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let version = *bytes.get(4).ok_or(ParseError::TruncatedHeader)?;
    if version != VERSION {
        return Err(ParseError::UnsupportedVersion(version));
    }
    let rank = *bytes.get(5).ok_or(ParseError::TruncatedHeader)?;
    if rank == 0 || rank > 4 {
        return Err(ParseError::UnsupportedRank(rank));
    }
    let header_end = 6 + 4 * rank as usize;
    if bytes.len() < header_end {
        return Err(ParseError::TruncatedHeader);
    }
    let mut dims = [1usize; 4];
    let offset = 4 - rank as usize;
    for (i, chunk) in bytes[6..header_end].chunks_exact(4).enumerate() {
        dims[offset + i] = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as usize;
    }
    let shape = Shape(dims);
    let payload = &bytes[header_end..];
    let expected = shape.numel() * 4;
    if payload.len() != expected {
        return Err(ParseError::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64))
        .collect();
    Ok(Tensor::from_vec(shape, data).expect("payload length matches shape"))
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}
