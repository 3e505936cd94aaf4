//! Binary weight files.
//!
//! Layout, all integers little-endian: the magic bytes `FSNW`, a `u16` format
//! version, a `u32` tensor count, then per tensor a `u16` name length with
//! that many UTF-8 bytes, a `u8` rank, one `u32` per dimension, and the
//! row-major `f32` payload. Any structural defect — wrong magic, unknown
//! version, short read, bad name encoding, dimension overflow — reports as
//! [`Error::CorruptWeights`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FSNW";
pub const VERSION: u16 = 1;

/// Sanity bound on tensor rank; everything in this crate is rank 1 or 2.
const MAX_RANK: u8 = 8;

/// A named tensor with explicit dimensions, the serialization currency.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = Self { name: name.into(), dims, data };
        if t.data.len() != t.elem_count() {
            return Err(Error::invalid(format!(
                "tensor {}: {} values for dims {:?}",
                t.name,
                t.data.len(),
                t.dims
            )));
        }
        Ok(t)
    }

    pub fn elem_count(&self) -> usize {
        self.dims.iter().product()
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptWeights(msg.into())
}

/// Serializes tensors in order. Callers holding raw files should wrap them in
/// a [`BufWriter`]; [`save_weights`] does.
pub fn write_weights(mut w: impl Write, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::invalid("too many tensors for the file format"))?;
    w.write_all(&count.to_le_bytes())?;
    for t in tensors {
        if t.data.len() != t.elem_count() {
            return Err(Error::invalid(format!(
                "tensor {}: {} values for dims {:?}",
                t.name,
                t.data.len(),
                t.dims
            )));
        }
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("tensor name too long: {}", t.name)))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        let rank = u8::try_from(t.dims.len())
            .map_err(|_| Error::invalid(format!("tensor rank too large: {}", t.name)))?;
        w.write_all(&[rank])?;
        for &d in &t.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::invalid(format!("dimension too large in {}", t.name)))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(t.data.len() * 4);
        for &v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn save_weights(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

fn fill(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            corrupt(format!("truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    fill(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Deserializes a whole weight file.
pub fn read_weights(mut r: impl Read) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    fill(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = read_u16(&mut r, "version")?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1024) as usize);
    for i in 0..count {
        let name_len = read_u16(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        fill(&mut r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| corrupt(format!("tensor {i}: name is not UTF-8")))?;
        let mut rank = [0u8; 1];
        fill(&mut r, &mut rank, &format!("rank of {name}"))?;
        if rank[0] > MAX_RANK {
            return Err(corrupt(format!("tensor {name}: rank {} too large", rank[0])));
        }
        let mut dims = Vec::with_capacity(rank[0] as usize);
        let mut elems: usize = 1;
        for _ in 0..rank[0] {
            let d = read_u32(&mut r, &format!("dims of {name}"))? as usize;
            elems = elems
                .checked_mul(d)
                .filter(|&n| n <= u32::MAX as usize)
                .ok_or_else(|| corrupt(format!("tensor {name}: element count overflow")))?;
            dims.push(d);
        }
        let mut bytes = vec![0u8; elems * 4];
        fill(&mut r, &mut bytes, &format!("data of {name}"))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok(tensors)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    read_weights(BufReader::new(File::open(path)?))
}
