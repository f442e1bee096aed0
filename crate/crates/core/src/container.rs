//! The LTXC binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LTXC"                      4 bytes magic
//! version                     u32
//! header_len                  u32
//! header                      header_len bytes of UTF-8 JSON (object, carries "dtype")
//! records until EOF:
//!   name_len                  u32
//!   name                      name_len bytes UTF-8
//!   rank                      u32
//!   extents                   rank × u32
//!   payload                   product(extents) × (f64 LE | u8)
//! ```

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LTXC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    U8,
}

impl DType {
    fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::U8 => "u8",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f64" => Some(DType::F64),
            "u8" => Some(DType::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Payload::F64(_) => DType::F64,
            Payload::U8(_) => DType::U8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            payload: Payload::F64(data),
        }
    }

    pub fn u8(name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            shape,
            payload: Payload::U8(data),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.payload {
            Payload::F64(v) => Ok(v),
            Payload::U8(_) => Err(Error::Malformed(format!(
                "record `{}` is not f64",
                self.name
            ))),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.payload {
            Payload::U8(v) => Ok(v),
            Payload::F64(_) => Err(Error::Malformed(format!(
                "record `{}` is not u8",
                self.name
            ))),
        }
    }
}

/// A JSON header plus a homogeneous list of named arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dtype: DType,
    pub header: Map<String, Value>,
    pub records: Vec<Record>,
}

impl Container {
    pub fn new(dtype: DType, header: Map<String, Value>) -> Self {
        Self {
            dtype,
            header,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.payload.dtype() != self.dtype {
            return Err(Error::invalid(format!(
                "record `{}` dtype does not match container dtype {}",
                record.name,
                self.dtype.as_str()
            )));
        }
        let numel: usize = record.shape.iter().product();
        if numel != record.payload.len() {
            return Err(Error::shape(
                "container",
                format!(
                    "record `{}` shape {:?} vs {} values",
                    record.name,
                    record.shape,
                    record.payload.len()
                ),
            ));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn record(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Malformed(format!("missing record `{name}`")))
    }

    pub fn header_str(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Malformed(format!("header field `{key}` missing")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.insert("dtype".into(), Value::String(self.dtype.as_str().into()));
        let header = serde_json::to_vec(&Value::Object(header)).expect("JSON map serializes");

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, header.len());
        out.extend_from_slice(&header);
        for rec in &self.records {
            put_u32(&mut out, rec.name.len());
            out.extend_from_slice(rec.name.as_bytes());
            put_u32(&mut out, rec.shape.len());
            for &d in &rec.shape {
                put_u32(&mut out, d);
            }
            match &rec.payload {
                Payload::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r
            .take(4)
            .map_err(|_| Error::VersionMismatch("truncated magic".into()))?;
        if magic != MAGIC {
            return Err(Error::VersionMismatch(format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch(format!(
                "version {version}, expected {VERSION}"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: Value = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Malformed(format!("header JSON: {e}")))?;
        let Value::Object(mut header) = header else {
            return Err(Error::Malformed("header is not a JSON object".into()));
        };
        let dtype = header
            .remove("dtype")
            .as_ref()
            .and_then(Value::as_str)
            .and_then(DType::parse)
            .ok_or_else(|| Error::Malformed("header lacks a valid dtype".into()))?;

        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Malformed("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("record `{name}` extents overflow")))?;
            let raw =
                r.take(numel.checked_mul(dtype.width()).ok_or_else(|| {
                    Error::Malformed(format!("record `{name}` payload overflows"))
                })?)?;
            let payload = match dtype {
                DType::F64 => Payload::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect(),
                ),
                DType::U8 => Payload::U8(raw.to_vec()),
            };
            records.push(Record {
                name,
                shape,
                payload,
            });
        }
        Ok(Self {
            dtype,
            header,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("container fields fit in u32");
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
            .ok_or_else(|| Error::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut header = Map::new();
        header.insert("kind".into(), Value::String("test".into()));
        let mut c = Container::new(DType::F64, header);
        c.push(Record::f64("w", vec![2, 2], vec![1.0, -2.5, 0.0, 1e-300]))
            .unwrap();
        c.push(Record::f64("b", vec![1], vec![3.0])).unwrap();
        c
    }

    #[test]
    fn encode_decode_roundtrip() {
        let c = sample();
        let d = Container::decode(&c.encode()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.encode(), c.encode());
    }

    #[test]
    fn bad_magic_is_version_mismatch() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(matches!(
            Container::decode(&bytes),
            Err(Error::VersionMismatch(_))
        ));
    }

    #[test]
    fn wrong_version_is_version_mismatch() {
        let mut bytes = sample().encode();
        bytes[4] = 9;
        assert!(matches!(
            Container::decode(&bytes),
            Err(Error::VersionMismatch(_))
        ));
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let bytes = sample().encode();
        assert!(matches!(
            Container::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn u8_container() {
        let mut c = Container::new(DType::U8, Map::new());
        c.push(Record::u8("m", vec![3], vec![1, 0, 1])).unwrap();
        assert!(c.push(Record::f64("x", vec![1], vec![0.0])).is_err());
        let d = Container::decode(&c.encode()).unwrap();
        assert_eq!(d.record("m").unwrap().as_u8().unwrap(), &[1, 0, 1]);
    }
}
