//! Single-file binary checkpoints: magic "SREMTL01", format version, config
//! hash, a named tensor table (name, rank, dims, f32 little-endian values),
//! and a trailing FNV-1a integrity checksum. Writes are atomic (temp file +
//! rename), loads validate magic, version, and checksum.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

pub const MAGIC: [u8; 8] = *b"SREMTL01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct CheckpointData {
    pub config_hash: u64,
    pub tensors: Vec<NamedTensor>,
}

impl CheckpointData {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], values: &[f64]) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            dims: dims.to_vec(),
            values: values.to_vec(),
        });
    }
}

pub fn encode(data: &CheckpointData) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&data.config_hash.to_le_bytes());
    out.extend_from_slice(&(data.tensors.len() as u32).to_le_bytes());
    for t in &data.tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointData> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 8 {
        return Err(Error::format("truncated checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(Error::format("checkpoint checksum mismatch (corrupt file)"));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_hash = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format("checkpoint tensor name is not UTF-8"))?;
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let b = r.take(4)?;
            values.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
        }
        tensors.push(NamedTensor { name, dims, values });
    }
    if r.pos != body.len() {
        return Err(Error::format("trailing bytes in checkpoint"));
    }
    Ok(CheckpointData {
        config_hash,
        tensors,
    })
}

/// Atomic write: encode to `<path>.tmp`, then rename over the target so a
/// failed write never leaves a partial checkpoint behind.
pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    let bytes = encode(data);
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}
