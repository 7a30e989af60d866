//! Binary tensor container.
//!
//! Layout: magic `ADSMT1`, one dtype byte (0 = f32, 1 = f64), a little-endian
//! `u32` rank, `rank` little-endian `u32` extents, then the row-major
//! little-endian payload.

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 6] = b"ADSMT1";

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(11 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Format("tensor container truncated in header".into()))?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Decodes one tensor from the front of `bytes`, converting to `T` if the
/// stored dtype differs. Returns the tensor and the number of bytes consumed.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < 11 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing ADSMT1 magic".into()));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[6])))?;
    let rank = read_u32(bytes, 7)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(read_u32(bytes, 11 + 4 * i)? as usize);
    }
    let start = 11 + 4 * rank;
    let n: usize = shape.iter().product();
    let end = start + n * dtype.size();
    let payload = bytes
        .get(start..end)
        .ok_or_else(|| Error::Format(format!("tensor payload truncated: need {} bytes", end)))?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    };
    Ok((Tensor::new(shape, data)?, end))
}
