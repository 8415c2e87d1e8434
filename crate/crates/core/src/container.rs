//! Named-tensor binary container used for checkpoints and feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SATC" | u32 version | u32 entry count | zero pad to 64
//! per entry:
//!   u32 name length | name (UTF-8) | u8 dtype | u8 rank | u64 extent × rank
//!   zero pad to a 64-byte boundary | payload | zero pad to 64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SATC";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl EntryData {
    pub fn code(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::F64(_) => 1,
            EntryData::U8(_) => 2,
            EntryData::U64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U8(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn type_name(&self) -> &'static str {
        match self {
            EntryData::F32(_) => "f32",
            EntryData::F64(_) => "f64",
            EntryData::U8(_) => "u8",
            EntryData::U64(_) => "u64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<Entry>,
}

fn pad_to(buf: &mut Vec<u8>) {
    let rem = buf.len() % ALIGN;
    if rem != 0 {
        buf.resize(buf.len() + ALIGN - rem, 0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Truncated { what: what.to_string() }),
        }
    }

    fn align(&mut self, what: &str) -> Result<()> {
        let rem = self.pos % ALIGN;
        if rem != 0 {
            self.take(ALIGN - rem, what)?;
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: EntryData) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!(
                "entry `{name}`: shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("entry `{name}`: rank {} too large", shape.len())));
        }
        if self.get(name).is_some() {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        let data = match T::DTYPE {
            crate::scalar::DType::F32 => EntryData::F32(t.data().iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()),
            crate::scalar::DType::F64 => EntryData::F64(t.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()),
        };
        self.push(name, t.shape(), data)
    }

    pub fn push_text(&mut self, name: &str, text: &str) -> Result<()> {
        let b = text.as_bytes().to_vec();
        self.push(name, &[b.len()], EntryData::U8(b))
    }

    pub fn push_u64(&mut self, name: &str, v: &[u64]) -> Result<()> {
        self.push(name, &[v.len()], EntryData::U64(v.to_vec()))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Reads a floating entry as `T`, converting between f32 and f64.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.require(name)?;
        let data: Vec<T> = match &e.data {
            EntryData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            EntryData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
            other => {
                return Err(Error::Format(format!(
                    "entry `{name}` holds {} values, expected floats",
                    other.type_name()
                )))
            }
        };
        Tensor::new(&e.shape, data)
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match &self.require(name)?.data {
            EntryData::U8(b) => String::from_utf8(b.clone())
                .map_err(|_| Error::Format(format!("entry `{name}` is not valid UTF-8"))),
            other => Err(Error::Format(format!("entry `{name}` holds {}, expected text", other.type_name()))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match &self.require(name)?.data {
            EntryData::U64(v) => Ok(v.clone()),
            other => Err(Error::Format(format!("entry `{name}` holds {}, expected u64", other.type_name()))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        pad_to(&mut buf);
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.push(e.data.code());
            buf.push(e.shape.len() as u8);
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            pad_to(&mut buf);
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                EntryData::U8(v) => buf.extend_from_slice(v),
                EntryData::U64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            }
            pad_to(&mut buf);
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = r.u32("entry count")? as usize;
        r.align("header padding")?;
        let mut c = Container::new();
        for i in 0..count {
            let what = format!("entry {i}");
            let nlen = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(nlen, &what)?)
                .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let what = format!("entry `{name}`");
            let code = r.u8(&what)?;
            let rank = r.u8(&what)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64(&what)?).map_err(|_| Error::Format(format!("{what}: extent overflows")))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{what}: element count overflows")))?;
            r.align(&what)?;
            let width = match code {
                0 => 4,
                1 => 8,
                2 => 1,
                3 => 8,
                _ => return Err(Error::Format(format!("{what}: unknown dtype code {code}"))),
            };
            let bytes = n
                .checked_mul(width)
                .ok_or_else(|| Error::Format(format!("{what}: payload size overflows")))?;
            let raw = r.take(bytes, &what)?;
            let data = match code {
                0 => EntryData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4"))).collect()),
                1 => EntryData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect()),
                2 => EntryData::U8(raw.to_vec()),
                _ => EntryData::U64(raw.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().expect("8"))).collect()),
            };
            r.align(&what)?;
            c.push(&name, &shape, data)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last entry", buf.len() - r.pos)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&b)
    }
}
