//! The SBCW container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SBCW" | version u32 | count u32
//! count x { name_len u16 | name | ndim u8 | dims u32 x ndim | dtype u8 | offset u64 }
//! payloads: fp32 buffers at their absolute offsets, each 64-byte aligned
//! ```

use std::fs;
use std::path::Path;

use crate::config::{AblationFlags, VariantSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Init;
use crate::tensor::Tensor;

use super::store::{WeightStore, MAX_NAME_BYTES};

pub const MAGIC: [u8; 4] = *b"SBCW";
pub const FORMAT_VERSION: u32 = 1;
pub const PAYLOAD_ALIGN: usize = 64;
pub const DTYPE_F32: u8 = 0;

fn align_up(v: usize) -> usize {
    v.div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN
}

/// Serializes a store to the container byte layout.
pub fn to_bytes(store: &WeightStore) -> Result<Vec<u8>> {
    let mut header_len = 12;
    for (name, t) in store.iter() {
        if name.is_empty() || name.len() > MAX_NAME_BYTES {
            return Err(Error::Data(format!("tensor name {name:?} is not 1..={MAX_NAME_BYTES} bytes")));
        }
        if t.rank() > u8::MAX as usize || t.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Data(format!("tensor {name:?} shape {:?} is not representable", t.shape())));
        }
        header_len += 2 + name.len() + 1 + 4 * t.rank() + 1 + 8;
    }
    let mut offsets = Vec::with_capacity(store.len());
    let mut end = header_len;
    for (_, t) in store.iter() {
        let off = align_up(end);
        offsets.push(off);
        end = off + 4 * t.numel();
    }

    let mut buf = Vec::with_capacity(end);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for ((name, t), off) in store.iter().zip(&offsets) {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(*off as u64).to_le_bytes());
    }
    for ((_, t), &off) in store.iter().zip(&offsets) {
        buf.resize(off, 0);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(store)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<WeightStore> {
    let path = path.as_ref();
    from_bytes(&fs::read(path)?, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos..self.pos + n) {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses container bytes; `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<WeightStore> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad magic".into(),
        });
    }
    let mut cur = Cursor { bytes, pos: 4, path };
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = cur.u32("tensor count")? as usize;
    let mut headers = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| corrupt(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let ndim = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("dims")? as usize);
        }
        let dtype = cur.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("tensor {name:?} has unsupported dtype code {dtype}"),
            });
        }
        let offset = cur.u64("payload offset")?;
        headers.push((name, shape, offset));
    }
    let header_end = cur.pos;
    let mut store = WeightStore::new();
    for (name, shape, offset) in headers {
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("tensor {name:?} shape {shape:?} overflows")))?;
        let start = usize::try_from(offset).ok().filter(|&o| o >= header_end);
        let range = start.and_then(|s| Some(s..s.checked_add(numel.checked_mul(4)?)?));
        let payload = range
            .and_then(|r| bytes.get(r))
            .ok_or_else(|| corrupt(format!("payload of {name:?} at offset {offset} lies outside the file")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor {name:?}: {e}")))?;
        store.insert(name, t).map_err(|e| corrupt(e.to_string()))?;
    }
    Ok(store)
}

/// Builds a seeded random model and writes its weights to `path`.
pub fn export_random(
    spec: VariantSpec,
    ablation: AblationFlags,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<WeightStore> {
    let store = Model::build(spec, ablation, Init::Random { seed })?.to_store();
    save(&store, path)?;
    Ok(store)
}
