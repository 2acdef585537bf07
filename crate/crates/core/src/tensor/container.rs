//! Flat binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PKTN" | version: u32 | rank: u32 | extents: u64 * rank | dtype: u32 | payload
//! ```
//!
//! `dtype` is 0 for `f64` and 1 for `f32`. Tensors are always held in `f64`
//! in memory; an `f32` payload is widened on read and narrowed on write.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PKTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u32 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&dtype.tag().to_le_bytes())?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor(r: &mut impl Read) -> Result<(Tensor, DType)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = read_u64(r)?;
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))?;
    let dtype = DType::from_tag(read_u32(r)?)?;
    let width = match dtype {
        DType::F64 => 8,
        DType::F32 => 4,
    };
    let mut raw = vec![0u8; count * width];
    r.read_exact(&mut raw)?;
    let data = match dtype {
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((Tensor::new(&shape, data)?, dtype))
}
