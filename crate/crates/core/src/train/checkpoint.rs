//! `TCJP` container: magic, u32 version, u32 entry count, a directory of
//! `(name, dtype u8, rank u8, dims u32[], payload offset u64)`, the raw
//! little-endian payloads, and a trailing CRC32 of everything before it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TCJP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl Payload {
    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U8(_) => DType::U8,
            Payload::U64(_) => DType::U64,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Payload::U8(v) => out.extend(v),
            Payload::U64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
        }
    }

    fn read(dtype: DType, b: &[u8]) -> Payload {
        match dtype {
            DType::F32 => Payload::F32(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => Payload::F64(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => Payload::U8(b.to_vec()),
            DType::U64 => Payload::U64(b.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        t.data().iter().for_each(|v| v.write_le(&mut bytes));
        Entry {
            name: name.into(),
            dims: t.shape().to_vec(),
            payload: Payload::read(T::DTYPE, &bytes),
        }
    }

    pub fn bytes(name: impl Into<String>, b: Vec<u8>) -> Self {
        Entry {
            name: name.into(),
            dims: vec![b.len()],
            payload: Payload::U8(b),
        }
    }

    pub fn u64s(name: impl Into<String>, v: Vec<u64>) -> Self {
        Entry {
            name: name.into(),
            dims: vec![v.len()],
            payload: Payload::U64(v),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let mut bytes = Vec::new();
        if self.payload.dtype() != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{}: stored as {:?}, requested {:?}",
                self.name,
                self.payload.dtype(),
                T::DTYPE
            )));
        }
        self.payload.write(&mut bytes);
        let data = bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Ok(Tensor::new(self.dims.clone(), data)?)
    }
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend(MAGIC);
    head.extend(VERSION.to_le_bytes());
    head.extend((entries.len() as u32).to_le_bytes());
    let dir_len: usize = entries.iter().map(|e| 4 + e.name.len() + 2 + 4 * e.dims.len() + 8).sum();
    let mut offset = (head.len() + dir_len) as u64;
    let mut payloads = Vec::new();
    for e in entries {
        head.extend((e.name.len() as u32).to_le_bytes());
        head.extend(e.name.as_bytes());
        head.push(e.payload.dtype() as u8);
        head.push(e.dims.len() as u8);
        for &d in &e.dims {
            head.extend((d as u32).to_le_bytes());
        }
        head.extend(offset.to_le_bytes());
        let before = payloads.len();
        e.payload.write(&mut payloads);
        offset += (payloads.len() - before) as u64;
    }
    head.extend(payloads);
    let crc = crc32fast::hash(&head);
    head.extend(crc.to_le_bytes());
    head
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| truncated(self.pos))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn truncated(at: usize) -> Error {
    Error::Checkpoint(format!("truncated at byte {at}"))
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 16 {
        return Err(truncated(bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { b: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype")))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        dir.push((name, dtype, dims, offset));
    }
    dir.into_iter()
        .map(|(name, dtype, dims, offset)| {
            let len = dims.iter().product::<usize>() * dtype.size();
            let end = offset.checked_add(len).filter(|&e| e <= body.len()).ok_or_else(|| truncated(body.len()))?;
            Ok(Entry {
                payload: Payload::read(dtype, &body[offset..end]),
                name,
                dims,
            })
        })
        .collect()
}

/// Writes through a temporary file and a rename, so a failed save never
/// leaves a partial checkpoint at `path`.
pub fn write_file(path: &Path, entries: &[Entry]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(entries))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<Entry>> {
    decode(&fs::read(path)?)
}
