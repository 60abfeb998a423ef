//! `SPT0` binary tensor encoding: magic, u32 LE rank, rank × u32 LE dims,
//! u8 dtype code, raw little-endian payload.

use std::path::Path;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SPT0";

/// A decoded tensor whose element type is only known at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested element type (lossy when narrowing).
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE.code());
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_payload<T: Real>(c: &mut Cursor<'_>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let size = T::DTYPE.size();
    let raw = c.take(numel * size, "tensor payload")?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Parse { offset: 0, msg: format!("bad tensor magic {magic:?}") });
    }
    let ndim = c.u32("rank")? as usize;
    if ndim > 16 {
        return Err(Error::Parse { offset: 4, msg: format!("implausible rank {ndim}") });
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(c.u32("dimension")? as usize);
    }
    let code_pos = c.pos;
    let code = c.take(1, "dtype code")?[0];
    let t = match DType::from_code(code) {
        Some(DType::F32) => AnyTensor::F32(decode_payload(&mut c, shape)?),
        Some(DType::F64) => AnyTensor::F64(decode_payload(&mut c, shape)?),
        None => {
            return Err(Error::Parse { offset: code_pos, msg: format!("unknown dtype code {code}") })
        }
    };
    Ok((t, c.pos))
}

pub fn write_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let bytes = std::fs::read(path)?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Parse { offset: used, msg: "trailing bytes after tensor".into() });
    }
    Ok(t)
}
