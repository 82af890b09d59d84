//! `FGT1` dense tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FGT1" | u32 rank | u32 dims[rank] | u8 dtype | data
//! ```
//!
//! The only dtype is `1` = `f32` little-endian, stored row-major.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FGT1";
pub const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || n != data.len() {
            return Err(Error::Shape {
                tensor: "tensor".into(),
                reason: format!("dims {dims:?} do not match {} values", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self { dims, data: vec![0.0; n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Errors unless the tensor has exactly `dims`; `name` labels the error.
    pub fn expect_dims(&self, name: &str, dims: &[usize]) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Shape {
                tensor: name.into(),
                reason: format!("expected dims {dims:?}, found {:?}", self.dims),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Format(format!("truncated while reading {what}")));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, expected FGT1".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let rank = u32_at(take(4, "rank")?);
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32_at(take(4, "dims")?));
        }
        let dtype = take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        let raw = take(n.checked_mul(4).ok_or_else(|| Error::Format("dims overflow".into()))?, "data")?;
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", cur.len())));
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
