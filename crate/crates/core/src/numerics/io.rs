//! Binary tensor format.
//!
//! ```text
//! magic   4 bytes  "HSPT"
//! dtype   u32 LE   1 = f32, 2 = f64
//! rank    u32 LE
//! extents rank x u64 LE
//! data    numel x dtype, little-endian, row-major
//! ```

use std::io::{Read, Write};

use super::tensor::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"HSPT";

pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + t.numel() * T::DTYPE.size_of());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Element, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(&encode_tensor(t))
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated tensor: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().expect("4 bytes")))
}

/// Reads one tensor, failing if its stored dtype differs from `T`.
pub fn read_tensor<T: Element, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let magic = read_exact(&mut r, 4)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let code = read_u32(&mut r)?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("stored dtype {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_exact(&mut r, 8)?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    let numel: usize = shape.iter().product();
    let size = dtype.size_of();
    let bytes = read_exact(&mut r, numel * size)?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode_tensor<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    read_tensor(bytes)
}
