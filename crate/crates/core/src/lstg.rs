//! LSTG: a minimal little-endian array container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "LSTG"
//! version    u16
//! meta_count u32      then per item: key_len u16, key, val_len u32, val (UTF-8)
//! entry_count u32     then per entry:
//!                       name_len u16, name (UTF-8)
//!                       dtype u8      (0 = f32, 1 = u8)
//!                       rank u8, dims u64 x rank
//!                       offset u64    (absolute byte offset of the payload)
//! payload             C row-major arrays, each starting on an 8-byte boundary
//! ```
//!
//! Metadata keys are written in sorted order and entries in insertion order, so
//! equal containers serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LSTG";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            other => Err(Error::Container(format!("unknown dtype code {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::U8(_) => DType::U8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    metadata: BTreeMap<String, String>,
    entries: Vec<(String, Array)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) -> Result<()> {
        let name = name.into();
        let expected: usize = array.dims.iter().product();
        if expected != array.data.len() {
            return Err(Error::Container(format!(
                "entry `{name}`: dims {:?} imply {expected} elements, got {}",
                array.dims,
                array.data.len()
            )));
        }
        if array.dims.len() > u8::MAX as usize {
            return Err(Error::Container(format!("entry `{name}`: rank too large")));
        }
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Container(format!("duplicate entry `{name}`")));
        }
        self.entries.push((name, array));
        Ok(())
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Result<()> {
        self.insert(
            name,
            Array {
                dims: dims.to_vec(),
                data: ArrayData::F32(data),
            },
        )
    }

    pub fn insert_u8(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<u8>) -> Result<()> {
        self.insert(
            name,
            Array {
                dims: dims.to_vec(),
                data: ArrayData::U8(data),
            },
        )
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.get(name) {
            Some(Array {
                dims,
                data: ArrayData::F32(v),
            }) => Ok((dims, v)),
            Some(_) => Err(Error::Container(format!("entry `{name}` is not f32"))),
            None => Err(Error::MissingEntry(name.to_string())),
        }
    }

    pub fn u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.get(name) {
            Some(Array {
                dims,
                data: ArrayData::U8(v),
            }) => Ok((dims, v)),
            Some(_) => Err(Error::Container(format!("entry `{name}` is not u8"))),
            None => Err(Error::MissingEntry(name.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            header.extend_from_slice(&(k.len() as u16).to_le_bytes());
            header.extend_from_slice(k.as_bytes());
            header.extend_from_slice(&(v.len() as u32).to_le_bytes());
            header.extend_from_slice(v.as_bytes());
        }
        header.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());

        // Offsets depend on the header length, which is known once the entry records are sized.
        let records_len: usize = self
            .entries
            .iter()
            .map(|(n, a)| 2 + n.len() + 1 + 1 + 8 * a.dims.len() + 8)
            .sum();
        let mut offset = align8(header.len() + records_len);
        let mut offsets = Vec::with_capacity(self.entries.len());
        for (_, a) in &self.entries {
            offsets.push(offset);
            offset = align8(offset + a.data.len() * a.dtype().size());
        }

        for ((name, array), off) in self.entries.iter().zip(&offsets) {
            header.extend_from_slice(&(name.len() as u16).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.push(array.dtype().code());
            header.push(array.dims.len() as u8);
            for d in &array.dims {
                header.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            header.extend_from_slice(&(*off as u64).to_le_bytes());
        }

        let mut out = header;
        for ((_, array), off) in self.entries.iter().zip(&offsets) {
            out.resize(*off, 0);
            match &array.data {
                ArrayData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
        }
        let end = align8(out.len());
        out.resize(end, 0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let klen = r.u16()? as usize;
            let key = r.string(klen)?;
            let vlen = r.u32()? as usize;
            let val = r.string(vlen)?;
            metadata.insert(key, val);
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = r.string(nlen)?;
            let dtype = DType::from_code(r.u8()?)?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            records.push((name, dtype, dims, offset));
        }

        let mut out = Container {
            metadata,
            entries: Vec::with_capacity(records.len()),
        };
        for (name, dtype, dims, offset) in records {
            let n = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::Container(format!("entry `{name}`: dims overflow")))?;
            let len = n
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Container(format!("entry `{name}`: size overflow")))?;
            let raw = offset
                .checked_add(len)
                .and_then(|end| bytes.get(offset..end))
                .ok_or_else(|| Error::Container(format!("entry `{name}` runs past end of file")))?;
            let data = match dtype {
                DType::F32 => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
                DType::U8 => ArrayData::U8(raw.to_vec()),
            };
            out.insert(name, Array { dims, data })?;
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingEntry(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_bytes(&bytes)
    }
}

fn align8(n: usize) -> usize {
    (n + 7) & !7
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Container("truncated header".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Container("non-UTF-8 string".into()))
    }
}
