//! The PFKV tensor file format.
//!
//! Layout, all little-endian regardless of host:
//!   magic   4 bytes  "PFKV"
//!   version u32      1
//!   ndim    u32
//!   dims    ndim x u32
//!   payload prod(dims) x f32, row-major
//!
//! A 0-dim tensor is a scalar with a 4-byte payload (the empty product is
//! one). In-memory values are f64; writing truncates to f32 with
//! round-to-nearest-even, so write-then-read is exact for values that are
//! already f32-representable and read-then-write is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PFKV";
pub const VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    for &dim in t.dims() {
        if dim > u32::MAX as usize {
            return Err(Error::Argument(format!("dimension {dim} exceeds u32")));
        }
    }
    if t.dims().len() > u32::MAX as usize {
        return Err(Error::Argument("too many dimensions".into()));
    }
    let mut out = Vec::with_capacity(12 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &dim in t.dims() {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decode one tensor starting at `*offset`, advancing it past the payload.
pub fn decode_tensor(bytes: &[u8], offset: &mut usize) -> Result<Tensor> {
    let take = |offset: &mut usize, n: usize, what: &str| -> Result<usize> {
        if *offset + n > bytes.len() {
            return Err(Error::Format {
                offset: *offset as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let at = *offset;
        *offset += n;
        Ok(at)
    };

    let at = take(offset, 4, "magic")?;
    if &bytes[at..at + 4] != MAGIC {
        return Err(Error::Format {
            offset: at as u64,
            msg: format!(
                "bad magic {:?}, expected {:?}",
                &bytes[at..at + 4],
                MAGIC
            ),
        });
    }
    let at = take(offset, 4, "version")?;
    let version = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: at as u64,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let at = take(offset, 4, "ndim")?;
    let ndim = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for axis in 0..ndim {
        let at = take(offset, 4, &format!("dimension {axis}"))?;
        dims.push(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    let at = take(offset, 4 * count, "payload")?;
    let data: Vec<f64> = bytes[at..at + 4 * count]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(&dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut offset = 0;
    let t = decode_tensor(&bytes, &mut offset)?;
    if offset != bytes.len() {
        return Err(Error::Format {
            offset: offset as u64,
            msg: format!("{} trailing bytes after payload", bytes.len() - offset),
        });
    }
    Ok(t)
}
