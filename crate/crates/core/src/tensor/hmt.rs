//! The HMT1 tensor container.
//!
//! Layout (little-endian):
//! - magic `HMT1`
//! - dtype: u8 (0 = f32, 1 = f64)
//! - rank: u8
//! - extents: rank x u32
//! - payload: row-major values

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::{DType, Real};

use super::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"HMT1";

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes one tensor, converting the stored element type to `T`. Returns
/// the tensor and the number of bytes consumed.
pub fn decode<T: Real>(bytes: &[u8]) -> std::result::Result<(Tensor<T>, usize), String> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err("missing HMT1 magic".into());
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| format!("unknown dtype {}", bytes[4]))?;
    let rank = bytes[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(format!("unsupported rank {rank}"));
    }
    let mut pos = 6;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes
            .get(pos..pos + 4)
            .ok_or("truncated extents")?;
        dims.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
        pos += 4;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("extent product overflows")?;
    let size = dtype.size();
    let payload = bytes
        .get(pos..pos + count * size)
        .ok_or_else(|| format!("payload truncated: need {} bytes", count * size))?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::of(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::of(f64::read_le(c)))
            .collect(),
    };
    let t = Tensor::from_external(&dims, data).map_err(|e| e.to_string())?;
    Ok((t, pos + count * size))
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes).map_err(|m| Error::format(path, m))?;
    if used != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[1, 2], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"HMT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..14], &2u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = encode(&t);
        assert!(decode::<f64>(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(decode::<f64>(&bad).is_err());
        let mut nan = b.clone();
        nan[10..18].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode::<f64>(&nan).is_err());
    }
}
