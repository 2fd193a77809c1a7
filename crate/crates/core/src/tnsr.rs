//! The `TNSR v1` binary tensor format.
//!
//! ```text
//! magic    4 bytes  "TNSR"
//! version  u32 LE   1
//! dtype    u8       0 = f32, 1 = u32 (index planes)
//! rank     u8       >= 1
//! dims     rank x u64 LE
//! payload  product(dims) elements, little-endian, row-major
//! ```
//!
//! No padding and no alignment between fields.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{IndexTensor, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U32: u8 = 1;

fn encode_header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + 4 * t.len() + 4);
    encode_header(&mut out, DTYPE_F32, t.shape());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_index_tensor(t: &IndexTensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(6 + 8 * t.shape().len() + 4 * t.data().len() + 4);
    encode_header(&mut out, DTYPE_U32, t.shape());
    for &v in t.data() {
        let v = u32::try_from(v)
            .map_err(|_| Error::format("payload", format!("index {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }
}

fn decode_header(bytes: &[u8]) -> Result<(u8, Vec<usize>, Reader<'_>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let dtype = r.take(1, "dtype")?[0];
    let rank = r.take(1, "rank")?[0] as usize;
    if rank == 0 {
        return Err(Error::format("rank", "rank-0 tensors are not supported"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(r.take(8, "dims")?.try_into().unwrap());
        if d == 0 {
            return Err(Error::format("dims", "zero-sized dimension"));
        }
        shape.push(
            usize::try_from(d).map_err(|_| Error::format("dims", "dimension exceeds usize"))?,
        );
    }
    Ok((dtype, shape, r))
}

fn payload_len(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("dims", "element count overflows"))
}

fn expect_end(r: &Reader<'_>) -> Result<()> {
    if r.pos != r.bytes.len() {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes", r.bytes.len() - r.pos),
        ));
    }
    Ok(())
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (dtype, shape, mut r) = decode_header(bytes)?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(
            "dtype",
            format!("expected f32 (code {DTYPE_F32}), found code {dtype}"),
        ));
    }
    let raw = r.take(payload_len(&shape)?, "payload")?;
    expect_end(&r)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format("payload", e.to_string()))
}

pub fn decode_index_tensor(bytes: &[u8]) -> Result<IndexTensor> {
    let (dtype, shape, mut r) = decode_header(bytes)?;
    if dtype != DTYPE_U32 {
        return Err(Error::format(
            "dtype",
            format!("expected u32 (code {DTYPE_U32}), found code {dtype}"),
        ));
    }
    let raw = r.take(payload_len(&shape)?, "payload")?;
    expect_end(&r)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    IndexTensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_tensor(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_index_tensor(path: impl AsRef<Path>, t: &IndexTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_index_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn load_index_tensor(path: impl AsRef<Path>) -> Result<IndexTensor> {
    let path = path.as_ref();
    decode_index_tensor(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
