//! Binary feature cache (`.adkf`).
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ADKF"
//! 4       4     version (u32, = 1)
//! 8       1     dtype   (1 = f32, 2 = f64)
//! 9       1     kind    (1 = IMAGE, 2 = HAND, 3 = DESC)
//! 10      2     reserved, must be 0
//! 12      4     dim (u32, >= 1)
//! 16      8     record_count (u64)
//! 24      ..    records
//! end-32  32    SHA-256 of every preceding byte
//!
//! record:
//!   u32 name_len, name_len bytes of UTF-8 (non-empty)
//!   u8  flags (bit 0: class index present, bit 1: desc index present)
//!   [u32 class_index] [u32 desc_index]
//!   dim values of dtype
//! ```
//!
//! Everything is little-endian with no padding. Decoding checks the header
//! first, then walks the records with bounds checks, then verifies the
//! digest, and only then inspects payload values. Any malformed input yields
//! [`AdkError::Format`] carrying the byte offset of the problem.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AdkError, Result};

pub const MAGIC: [u8; 4] = *b"ADKF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
pub const DIGEST_LEN: usize = 32;

const FLAG_CLASS: u8 = 0b01;
const FLAG_DESC: u8 = 0b10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CacheKind {
    /// Image features; `class_index` is the label when known.
    Image,
    /// Handcrafted prompt features; `name` is the class name.
    Hand,
    /// Description features; `name` is the description text and both indices
    /// are set.
    Desc,
}

impl CacheKind {
    fn code(self) -> u8 {
        match self {
            CacheKind::Image => 1,
            CacheKind::Hand => 2,
            CacheKind::Desc => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(CacheKind::Image),
            2 => Some(CacheKind::Hand),
            3 => Some(CacheKind::Desc),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub name: String,
    pub class_index: Option<u32>,
    pub desc_index: Option<u32>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub kind: CacheKind,
    pub dtype: Dtype,
    pub dim: u32,
    pub records: Vec<CacheRecord>,
}

impl FeatureCache {
    pub fn new(kind: CacheKind, dtype: Dtype, dim: u32) -> Self {
        FeatureCache {
            kind,
            dtype,
            dim,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn encode(cache: &FeatureCache) -> Result<Vec<u8>> {
    if cache.dim == 0 {
        return Err(AdkError::Data("cache dim must be >= 1".into()));
    }
    let dim = cache.dim as usize;
    let mut out = Vec::with_capacity(HEADER_LEN + cache.records.len() * (16 + dim * cache.dtype.width()) + DIGEST_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(cache.dtype.code());
    out.push(cache.kind.code());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&cache.dim.to_le_bytes());
    out.extend_from_slice(&(cache.records.len() as u64).to_le_bytes());
    for (i, r) in cache.records.iter().enumerate() {
        if r.name.is_empty() {
            return Err(AdkError::Data(format!("record {i} has an empty name")));
        }
        if r.values.len() != dim {
            return Err(AdkError::Data(format!(
                "record {i} has {} values, cache dim is {dim}",
                r.values.len()
            )));
        }
        let name_len = u32::try_from(r.name.len())
            .map_err(|_| AdkError::Data(format!("record {i} name too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        let mut flags = 0u8;
        if r.class_index.is_some() {
            flags |= FLAG_CLASS;
        }
        if r.desc_index.is_some() {
            flags |= FLAG_DESC;
        }
        out.push(flags);
        if let Some(c) = r.class_index {
            out.extend_from_slice(&c.to_le_bytes());
        }
        if let Some(d) = r.desc_index {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &x in &r.values {
            if !x.is_finite() {
                return Err(AdkError::Data(format!("record {i} ({:?}) has non-finite value {x}", r.name)));
            }
            match cache.dtype {
                Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => {
                    let y = x as f32;
                    if !y.is_finite() {
                        return Err(AdkError::Data(format!("record {i}: {x} overflows f32")));
                    }
                    out.extend_from_slice(&y.to_le_bytes());
                }
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| AdkError::format(self.pos, format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<FeatureCache> {
    if bytes.len() < HEADER_LEN {
        return Err(AdkError::format(bytes.len(), "file shorter than header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(AdkError::format(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(AdkError::format(4, format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(bytes[8]).ok_or_else(|| AdkError::format(8, format!("unknown dtype {}", bytes[8])))?;
    let kind = CacheKind::from_code(bytes[9]).ok_or_else(|| AdkError::format(9, format!("unknown kind {}", bytes[9])))?;
    if bytes[10] != 0 || bytes[11] != 0 {
        return Err(AdkError::format(10, "reserved bytes are not zero"));
    }
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if dim == 0 {
        return Err(AdkError::format(12, "dim is zero"));
    }
    let record_count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(AdkError::format(bytes.len(), "file too short for checksum"));
    }
    let body_end = bytes.len() - DIGEST_LEN;
    let payload_len = dim as u64 * dtype.width() as u64;
    // name_len + one name byte + flags + payload
    let min_record = 4 + 1 + 1 + payload_len;
    if record_count > (body_end - HEADER_LEN) as u64 / min_record {
        return Err(AdkError::format(16, format!("record count {record_count} exceeds file size")));
    }

    let mut rd = Reader {
        buf: &bytes[..body_end],
        pos: HEADER_LEN,
    };
    let mut records = Vec::with_capacity(record_count as usize);
    let mut value_offsets = Vec::with_capacity(record_count as usize);
    for _ in 0..record_count {
        let start = rd.pos;
        let name_len = rd.u32("name length")? as usize;
        if name_len == 0 {
            return Err(AdkError::format(start, "empty record name"));
        }
        let name_at = rd.pos;
        let name = std::str::from_utf8(rd.take(name_len, "name")?)
            .map_err(|e| AdkError::format(name_at, format!("name is not UTF-8: {e}")))?
            .to_owned();
        let flags_at = rd.pos;
        let flags = rd.u8("flags")?;
        if flags & !(FLAG_CLASS | FLAG_DESC) != 0 {
            return Err(AdkError::format(flags_at, format!("unknown flag bits {flags:#04x}")));
        }
        let class_index = if flags & FLAG_CLASS != 0 { Some(rd.u32("class index")?) } else { None };
        let desc_index = if flags & FLAG_DESC != 0 { Some(rd.u32("desc index")?) } else { None };
        value_offsets.push(rd.pos);
        let raw = rd.take(payload_len as usize, "payload")?;
        let values = match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        records.push(CacheRecord {
            name,
            class_index,
            desc_index,
            values,
        });
    }
    if rd.pos != body_end {
        return Err(AdkError::format(rd.pos, "trailing bytes after last record"));
    }
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(AdkError::format(body_end, "checksum mismatch"));
    }
    for (r, at) in records.iter().zip(&value_offsets) {
        if let Some(k) = r.values.iter().position(|x| !x.is_finite()) {
            return Err(AdkError::Data(format!(
                "record {:?} has non-finite value at coordinate {k} (byte {})",
                r.name,
                at + k * dtype.width()
            )));
        }
    }
    Ok(FeatureCache {
        kind,
        dtype,
        dim,
        records,
    })
}

pub fn write_cache(cache: &FeatureCache, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(cache)?;
    std::fs::write(path, bytes).map_err(|e| AdkError::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<FeatureCache> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| AdkError::io(path, e))?;
    decode(&bytes)
}
