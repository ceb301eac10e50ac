//! Binary container shared by checkpoints (`CKPT`) and compiled plans (`PLAN`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CNV2" | version u32 | tag [u8; 4] | header_len u32 | header (canonical JSON)
//! record_count u32 | records...
//! record: kind u8 | name_len u32 | name | rank u8 | dims u32 * rank
//!         | values (f32, or u32 for index records) | has_mask u8 | mask u8 * numel
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CNV2";
pub const VERSION: u32 = 1;
pub const CHECKPOINT_TAG: [u8; 4] = *b"CKPT";
pub const PLAN_TAG: [u8; 4] = *b"PLAN";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    Weight = 0,
    NoDecay = 1,
    Buffer = 2,
    /// `(source, destination)` pairs stored as u32.
    Index = 3,
}

impl RecordKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Self::Weight,
            1 => Self::NoDecay,
            2 => Self::Buffer,
            3 => Self::Index,
            other => return Err(Error::Format(format!("unknown record kind {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub kind: RecordKind,
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
    pub mask: Option<Vec<u8>>,
}

impl Record {
    pub fn f32(kind: RecordKind, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            kind,
            name: name.into(),
            shape,
            payload: Payload::F32(data),
            mask: None,
        }
    }

    pub fn index(name: impl Into<String>, pairs: &[(u32, u32)]) -> Self {
        Self {
            kind: RecordKind::Index,
            name: name.into(),
            shape: vec![pairs.len(), 2],
            payload: Payload::U32(pairs.iter().flat_map(|&(s, d)| [s, d]).collect()),
            mask: None,
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.payload {
            Payload::F32(v) => Ok(v),
            Payload::U32(_) => Err(Error::Format(format!("record `{}` is not f32", self.name))),
        }
    }

    pub fn as_pairs(&self) -> Result<Vec<(u32, u32)>> {
        match &self.payload {
            Payload::U32(v) => Ok(v.chunks_exact(2).map(|c| (c[0], c[1])).collect()),
            Payload::F32(_) => Err(Error::Format(format!("record `{}` is not an index map", self.name))),
        }
    }
}

/// Tagged header plus named records.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub tag: [u8; 4],
    pub header: String,
    pub records: Vec<Record>,
}

/// Serialises `value` with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| Error::Format(e.to_string()))
}

impl Container {
    pub fn new<T: Serialize>(tag: [u8; 4], header: &T) -> Result<Self> {
        Ok(Self {
            tag,
            header: canonical_json(header)?,
            records: Vec::new(),
        })
    }

    pub fn header_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_str(&self.header).map_err(|e| Error::Format(format!("header: {e}")))
    }

    pub fn expect_tag(&self, tag: [u8; 4]) -> Result<()> {
        if self.tag != tag {
            return Err(Error::Format(format!(
                "expected a {} file, found {}",
                String::from_utf8_lossy(&tag),
                String::from_utf8_lossy(&self.tag)
            )));
        }
        Ok(())
    }

    /// Records keyed by name.
    pub fn by_name(&self) -> BTreeMap<&str, &Record> {
        self.records.iter().map(|r| (r.name.as_str(), r)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.tag);
        put_u32(&mut out, len_u32(self.header.len())?);
        out.extend_from_slice(self.header.as_bytes());
        put_u32(&mut out, len_u32(self.records.len())?);
        for r in &self.records {
            let numel: usize = r.shape.iter().product();
            if numel != r.payload.len() {
                return Err(Error::Format(format!(
                    "record `{}`: shape {:?} holds {numel} values, payload has {}",
                    r.name,
                    r.shape,
                    r.payload.len()
                )));
            }
            let index = r.kind == RecordKind::Index;
            if index != matches!(r.payload, Payload::U32(_)) {
                return Err(Error::Format(format!("record `{}`: kind and payload type disagree", r.name)));
            }
            out.push(r.kind as u8);
            put_u32(&mut out, len_u32(r.name.len())?);
            out.extend_from_slice(r.name.as_bytes());
            let rank = u8::try_from(r.shape.len()).map_err(|_| Error::Format("rank above 255".into()))?;
            out.push(rank);
            for &d in &r.shape {
                put_u32(&mut out, len_u32(d)?);
            }
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
            match &r.mask {
                Some(m) => {
                    if m.len() != numel {
                        return Err(Error::Format(format!("record `{}`: mask length mismatch", r.name)));
                    }
                    out.push(1);
                    out.extend_from_slice(m);
                }
                None => out.push(0),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a CNV2 container".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let header_len = r.u32()? as usize;
        let header = String::from_utf8(r.take(header_len)?.to_vec())
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let kind = RecordKind::from_byte(r.u8()?)?;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("record too large".into()))?)?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let payload = if kind == RecordKind::Index {
                Payload::U32(words.map(u32::from_le_bytes).collect())
            } else {
                Payload::F32(words.map(f32::from_le_bytes).collect())
            };
            let mask = match r.u8()? {
                0 => None,
                1 => Some(r.take(numel)?.to_vec()),
                other => return Err(Error::Format(format!("bad mask flag {other}"))),
            };
            records.push(Record {
                kind,
                name,
                shape,
                payload,
                mask,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tag, header, records })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
