//! Binary checkpoint format.
//!
//! ```text
//! magic    "FGCKPT1\0"                      8 bytes
//! count    u64 LE
//! entry*   name_len u64 LE, name UTF-8,
//!          rank u64 LE, extents u64 LE × rank,
//!          payload f64 LE × product(extents)
//! ```
//!
//! The loader rejects a wrong magic, truncated data and trailing bytes.
//! `requires_grad` flags are not stored; loaded tensors come back frozen.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FGCKPT1\0";

pub fn encode(store: &ParameterStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + store.num_elements() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
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
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, not a FGCKPT1 checkpoint".into()));
    }
    let count = r.len()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("entry name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.len()?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("extents of {name:?} overflow")))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint(format!("payload of {name:?} overflows"))
        })?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store
            .insert(name.clone(), Tensor::new(shape, data)?)
            .map_err(|_| Error::Checkpoint(format!("duplicate entry {name:?}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after {count} entries",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Write-then-rename so an interrupted save never clobbers a good file.
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(store))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterStore> {
    decode(&fs::read(path)?)
}
