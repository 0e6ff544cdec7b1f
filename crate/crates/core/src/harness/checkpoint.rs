//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! `"MWTC"`, u32 version, u32 entry count, then per entry sorted by name:
//! u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = u8, 2 = u64),
//! u8 rank, u32 per dim, raw payload.

use std::collections::BTreeMap;
use std::path::Path;

use super::HarnessError;

pub const MAGIC: &[u8; 4] = b"MWTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    /// Raw bytes; used for the config text.
    U8(Vec<u8>),
    /// Counters such as optimizer steps.
    U64(Vec<u64>),
}

impl EntryData {
    fn code(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::U8(_) => 1,
            EntryData::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::U8(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: EntryData,
}

/// Named tensor table. Names are kept sorted, which makes the encoding
/// canonical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Entry>,
}

fn corrupt(detail: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(detail.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {} (need {n} more)", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, HarnessError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, HarnessError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: EntryData) {
        self.entries.insert(name.into(), Entry { shape, data });
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) {
        self.insert(name, shape.to_vec(), EntryData::F32(data.to_vec()));
    }

    pub fn insert_u64(&mut self, name: impl Into<String>, data: &[u64]) {
        self.insert(name, vec![data.len()], EntryData::U64(data.to_vec()));
    }

    fn get(&self, name: &str) -> Result<&Entry, HarnessError> {
        self.entries.get(name).ok_or_else(|| corrupt(format!("missing entry {name:?}")))
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32]), HarnessError> {
        let e = self.get(name)?;
        match &e.data {
            EntryData::F32(v) => Ok((&e.shape, v)),
            _ => Err(corrupt(format!("entry {name:?} is not f32"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], HarnessError> {
        match &self.get(name)?.data {
            EntryData::U8(v) => Ok(v),
            _ => Err(corrupt(format!("entry {name:?} is not u8"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64], HarnessError> {
        match &self.get(name)?.data {
            EntryData::U64(v) => Ok(v),
            _ => Err(corrupt(format!("entry {name:?} is not u64"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, HarnessError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            let count: usize = e.shape.iter().product();
            if count != e.data.len() {
                return Err(corrupt(format!("entry {name:?}: shape {:?} holds {count} values, data has {}", e.shape, e.data.len())));
            }
            let name_len = u16::try_from(name.len()).map_err(|_| corrupt(format!("name too long: {name:?}")))?;
            let rank = u8::try_from(e.shape.len()).map_err(|_| corrupt(format!("rank too large for {name:?}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.data.code());
            out.push(rank);
            for &d in &e.shape {
                let d = u32::try_from(d).map_err(|_| corrupt(format!("dimension too large in {name:?}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::U8(v) => out.extend_from_slice(v),
                EntryData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let n = r.u32()?;
        let mut ck = Checkpoint::default();
        let mut prev: Option<String> = None;
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("entry name is not UTF-8"))?.to_string();
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(corrupt(format!("entries not sorted at {name:?}")));
            }
            let code = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflow"))?;
            let data = match code {
                0 => EntryData::F32(
                    r.take(count.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => EntryData::U8(r.take(count)?.to_vec()),
                2 => EntryData::U64(
                    r.take(count.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(corrupt(format!("unknown dtype code {other} in {name:?}"))),
            };
            prev = Some(name.clone());
            ck.entries.insert(name, Entry { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let bytes = self.to_bytes()?;
        // Write then rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
