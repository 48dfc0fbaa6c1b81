//! Dense tensors, the `BBQT` binary tensor file, and CSV reports.
//!
//! File layout (little-endian throughout):
//!
//! ```text
//! offset  size     field
//! 0       4        magic "BBQT"
//! 4       4        version (u32) = 1
//! 8       1        dtype (u8): 0 = real32, 1 = packed nibbles
//! 9       4        ndim (u32)
//! 13      8*ndim   dims (u64 each)
//! 13+8n   ...      payload
//! ```
//!
//! A real32 payload is `4 * product(dims)` bytes. A packed-nibble payload is
//! `ceil(product(dims) / 2)` bytes, element `2k` in the low nibble of byte `k`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"BBQT";
pub const VERSION: u32 = 1;

/// Byte offset of the payload for a file with `ndim` dimensions.
pub const fn payload_offset(ndim: usize) -> usize {
    13 + 8 * ndim
}

/// Dense row-major tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Builds a tensor from `f64` values, rounding each to `f32`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last (channel) dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Product of every dimension but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Element type tag stored in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    Real32 = 0,
    PackedNibbles = 1,
}

impl TryFrom<u8> for Dtype {
    type Error = Error;

    fn try_from(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::Real32),
            1 => Ok(Dtype::PackedNibbles),
            other => Err(Error::UnknownDtype(other)),
        }
    }
}

/// Decoded contents of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorFile {
    Real(Tensor),
    Packed { shape: Vec<usize>, bytes: Vec<u8> },
}

fn packed_len(numel: usize) -> usize {
    numel.div_ceil(2)
}

fn encode_header(buf: &mut Vec<u8>, dtype: Dtype, shape: &[usize]) {
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(dtype as u8);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

impl TensorFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        match self {
            TensorFile::Real(t) => {
                encode_header(&mut buf, Dtype::Real32, t.shape());
                buf.reserve(4 * t.numel());
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorFile::Packed { shape, bytes } => {
                let numel: usize = shape.iter().product();
                if bytes.len() != packed_len(numel) {
                    return Err(Error::Shape(format!(
                        "packed payload for {numel} elements must be {} bytes, got {}",
                        packed_len(numel),
                        bytes.len()
                    )));
                }
                encode_header(&mut buf, Dtype::PackedNibbles, shape);
                buf.extend_from_slice(bytes);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let header_short = |expected: usize| Error::Truncated {
            expected,
            found: buf.len(),
        };
        if buf.len() < 4 {
            return Err(header_short(payload_offset(0)));
        }
        let magic: [u8; 4] = buf[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if buf.len() < payload_offset(0) {
            return Err(header_short(payload_offset(0)));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = Dtype::try_from(buf[8])?;
        let ndim = u32::from_le_bytes(buf[9..13].try_into().unwrap()) as usize;
        let offset = payload_offset(ndim);
        if buf.len() < offset {
            return Err(header_short(offset));
        }
        let shape: Vec<usize> = buf[13..offset]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let numel: usize = shape.iter().product();
        let payload = &buf[offset..];
        let expected = match dtype {
            Dtype::Real32 => 4 * numel,
            Dtype::PackedNibbles => packed_len(numel),
        };
        if payload.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        Ok(match dtype {
            Dtype::Real32 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                TensorFile::Real(Tensor::new(shape, data)?)
            }
            Dtype::PackedNibbles => TensorFile::Packed {
                shape,
                bytes: payload.to_vec(),
            },
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    TensorFile::Real(t.clone()).write(path)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    match TensorFile::read(path)? {
        TensorFile::Real(t) => Ok(t),
        TensorFile::Packed { .. } => Err(Error::InvalidArgument(
            "file holds packed nibbles, not a real32 tensor".into(),
        )),
    }
}

/// Writes `rows` under `header` as comma-separated values with a header line.
pub fn emit_csv<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(header, rows, file)
}

/// Same as [`emit_csv`] but to any writer (stdout for the CLI).
pub fn write_csv<S: AsRef<str>, W: std::io::Write>(header: &[&str], rows: &[Vec<S>], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(header)?;
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Shape(format!(
                "csv row {i} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        w.write_record(row.iter().map(|s| s.as_ref()))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
