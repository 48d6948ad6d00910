//! Tagged binary container used for parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MSTH" | version: u32 | record*
//! record := name_len: u32 | name: utf8 | dtype: u8 | ndim: u32 | dims: u64*ndim
//!           | payload_len: u64 | payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"MSTH";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    U32 = 2,
    U64 = 3,
    U8 = 4,
}

impl Dtype {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::U32,
            3 => Dtype::U64,
            4 => Dtype::U8,
            _ => return Err(Error::Format(format!("unknown dtype tag {v}"))),
        })
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 | Dtype::U64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn from_reals<R: Real>(values: &[R]) -> Self {
        let mut payload = Vec::with_capacity(values.len() * R::DTYPE.size());
        for v in values {
            v.write_le(&mut payload);
        }
        Record {
            dtype: R::DTYPE,
            shape: vec![values.len() as u64],
            payload,
        }
    }

    pub fn from_u64s(values: &[u64]) -> Self {
        Record {
            dtype: Dtype::U64,
            shape: vec![values.len() as u64],
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Record {
            dtype: Dtype::U8,
            shape: vec![bytes.len() as u64],
            payload: bytes.to_vec(),
        }
    }

    pub fn to_reals<R: Real>(&self) -> Result<Vec<R>> {
        match self.dtype {
            Dtype::F32 => Ok(self
                .payload
                .chunks_exact(4)
                .map(|c| R::c(f32::read_le(c) as f64))
                .collect()),
            Dtype::F64 => Ok(self
                .payload
                .chunks_exact(8)
                .map(|c| R::c(f64::read_le(c)))
                .collect()),
            other => Err(Error::Format(format!("expected float record, found {other:?}"))),
        }
    }

    pub fn to_u64s(&self) -> Result<Vec<u64>> {
        if self.dtype != Dtype::U64 {
            return Err(Error::Format(format!("expected u64 record, found {:?}", self.dtype)));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Ordered name → record map; ordering makes the byte stream deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub records: BTreeMap<String, Record>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, record: Record) {
        self.records.insert(name.into(), record);
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing record `{name}`")))
    }

    pub fn reals<R: Real>(&self, name: &str) -> Result<Vec<R>> {
        self.get(name)?.to_reals()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rec.dtype as u8);
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for d in &rec.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&(rec.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&rec.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected MSTH".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let mut records = BTreeMap::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("record name is not utf-8".into()))?;
            let dtype = Dtype::from_u8(cur.take(1)?[0])?;
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
            let len = cur.u64()? as usize;
            let expected = shape.iter().product::<u64>() as usize * dtype.size();
            if len != expected {
                return Err(Error::Format(format!(
                    "record `{name}`: payload {len} bytes, shape implies {expected}"
                )));
            }
            let payload = cur.take(len)?.to_vec();
            records.insert(name, Record { dtype, shape, payload });
        }
        Ok(Container { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Container::from_bytes(b"NOPE\x01\0\0\0").is_err());
        let mut c = Container::new();
        c.insert("w", Record::from_reals(&[1.0f32, 2.0]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn header_is_magic_then_version() {
        let bytes = Container::new().to_bytes();
        assert_eq!(&bytes[..4], b"MSTH");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    }

    proptest! {
        #[test]
        fn roundtrip(values in prop::collection::vec(-1e6f32..1e6, 0..64),
                     ints in prop::collection::vec(any::<u64>(), 0..8)) {
            let mut c = Container::new();
            c.insert("a.values", Record::from_reals(&values));
            c.insert("b.ints", Record::from_u64s(&ints));
            c.insert("cfg", Record::from_bytes(b"x=1"));
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.reals::<f32>("a.values").unwrap(), values);
        }
    }
}
