//! `PDT1` tensor files: magic `PDT1`, u32 LE rank, rank × u32 LE dims, then
//! an f32 LE row-major payload.
//!
//! Model checkpoints need bit-exact f64 parameters, so they use the same
//! framing under magic `PDT8` with an f64 LE payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC_F32: &[u8; 4] = b"PDT1";
pub const MAGIC_F64: &[u8; 4] = b"PDT8";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor payload",
                format!("{n} elements for dims {dims:?}"),
                data.len(),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }
}

trait Element: Sized + Copy {
    const MAGIC: &'static [u8; 4];
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const MAGIC: &'static [u8; 4] = MAGIC_F32;
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Element for f64 {
    const MAGIC: &'static [u8; 4] = MAGIC_F64;
    const SIZE: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        let mut a = [0u8; 8];
        a.copy_from_slice(&b[..8]);
        f64::from_le_bytes(a)
    }
}

fn encode<T: Element>(dims: &[usize], data: &[T], out: &mut Vec<u8>) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::shape("tensor payload", n, data.len()));
    }
    out.extend_from_slice(T::MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(n * T::SIZE);
    for &v in data {
        v.put(out);
    }
    Ok(())
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<u32, String> {
    let end = *pos + 4;
    let s = bytes
        .get(*pos..end)
        .ok_or_else(|| format!("truncated while reading {what}"))?;
    *pos = end;
    Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

/// Decodes one tensor starting at `*pos`, advancing it past the payload.
fn decode<T: Element>(bytes: &[u8], pos: &mut usize) -> std::result::Result<Tensor<T>, String> {
    let magic = bytes.get(*pos..*pos + 4).ok_or("truncated before magic")?;
    if magic != T::MAGIC {
        return Err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(T::MAGIC)
        ));
    }
    *pos += 4;
    let rank = read_u32(bytes, pos, "rank")? as usize;
    if rank > 16 {
        return Err(format!("implausible rank {rank}"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(read_u32(bytes, pos, &format!("dim {i}"))? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("element count overflows")?;
    let len = n.checked_mul(T::SIZE).ok_or("payload size overflows")?;
    let payload = bytes
        .get(*pos..*pos + len)
        .ok_or_else(|| format!("truncated payload: need {len} bytes, have {}", bytes.len() - *pos))?;
    *pos += len;
    let data = payload.chunks_exact(T::SIZE).map(T::get).collect();
    Ok(Tensor { dims, data })
}

pub fn encode_f32(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode(dims, data, &mut out)?;
    Ok(out)
}

pub fn encode_f64_into(dims: &[usize], data: &[f64], out: &mut Vec<u8>) -> Result<()> {
    encode(dims, data, out)
}

pub fn decode_f32(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let t = decode(bytes, &mut pos)?;
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - pos));
    }
    Ok(t)
}

pub fn decode_f64_at(bytes: &[u8], pos: &mut usize) -> std::result::Result<Tensor<f64>, String> {
    decode(bytes, pos)
}

pub fn write_pdt1(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode_f32(dims, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes f64 values narrowed to the f32 payload of `PDT1`.
pub fn write_pdt1_f64(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let narrowed: Vec<f32> = data.iter().map(|&v| v as f32).collect();
    write_pdt1(path, dims, &narrowed)
}

pub fn read_pdt1(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32(&bytes).map_err(|message| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    })
}
