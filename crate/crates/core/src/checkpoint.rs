//! Binary checkpoint container.
//!
//! ```text
//! "MGCK" | version: u32 | count: u64 | count × record
//! record = name_len: u32 | name | dtype: u8 | rank: u32 | rank × dim: u64 | payload (LE)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U64(_) => 2,
            Payload::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    fn width(tag: u8) -> Option<usize> {
        [4, 8, 8, 1].get(tag as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], payload: Payload) {
        debug_assert_eq!(dims.iter().product::<usize>(), payload.len());
        self.records.push(Record {
            name: name.into(),
            dims: dims.to_vec(),
            payload,
        });
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(
                t.data()
                    .iter()
                    .map(|v| v.to_f32().unwrap_or(f32::NAN))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                t.data()
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN))
                    .collect(),
            ),
        };
        self.push(name, t.shape(), payload);
    }

    pub fn push_u64(&mut self, name: impl Into<String>, values: &[u64]) {
        self.push(name, &[values.len()], Payload::U64(values.to_vec()));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.push(name, &[bytes.len()], Payload::U8(bytes.to_vec()));
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Corrupt(format!("missing record '{name}'")))
    }

    /// Tensor record of element type `T`.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self.get(name)?;
        let data: Vec<T> = match (&r.payload, T::DTYPE) {
            (Payload::F32(v), DType::F32) => v.iter().map(|x| T::of(*x as f64)).collect(),
            (Payload::F64(v), DType::F64) => v.iter().map(|x| T::of(*x)).collect(),
            _ => {
                return Err(Error::Format(format!(
                    "record '{name}' does not hold {:?} values",
                    T::DTYPE
                )))
            }
        };
        Tensor::new(&r.dims, data).map_err(|e| Error::Corrupt(format!("record '{name}': {e}")))
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(Error::Format(format!("record '{name}' is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.payload {
            Payload::U8(v) => Ok(v),
            _ => Err(Error::Format(format!("record '{name}' is not u8"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.tag());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for d in &r.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                Payload::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                Payload::U64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = r.u64()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Corrupt("record name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let width = Payload::width(tag)
                .ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .and_then(|n| n.checked_mul(width))
                .ok_or_else(|| Error::Corrupt(format!("record '{name}' size overflows")))?;
            let raw = r.take(n)?;
            let payload = match tag {
                0 => Payload::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                1 => Payload::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
                2 => Payload::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                _ => Payload::U8(raw.to_vec()),
            };
            records.push(Record {
                name,
                dims,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
