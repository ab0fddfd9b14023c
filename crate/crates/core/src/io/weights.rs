//! `IFW1` named-tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! b"IFW1"  u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u32 extent, numel × f32 }
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

const MAGIC: &[u8; 4] = b"IFW1";

/// Insertion-ordered map from unique names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::arg(format!("tensor name of {} bytes is too long", name.len())));
        }
        if self.index.contains_key(&name) {
            return Err(Error::arg(format!("duplicate tensor name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format(0, format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected IFW1"));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        let actual = crc32fast::hash(&bytes[..body_len]);
        if stored != actual {
            return Err(Error::format(
                body_len as u64,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        let mut r = Reader { buf: &bytes[..body_len], pos: 4 };
        let count = r.u32()?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let entry_at = r.pos as u64;
            let name_len = r.u16()? as usize;
            let name_at = r.pos as u64;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(name_at, "tensor name is not UTF-8"))?
                .to_owned();
            let rank_at = r.pos as u64;
            let rank = r.u8()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::format(rank_at, format!("tensor `{name}` has unsupported rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    Error::format(r.pos as u64, format!("payload of `{name}` {shape:?} runs past the end of the file"))
                })?;
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if store.contains(&name) {
                return Err(Error::format(entry_at, format!("duplicate tensor name `{name}`")));
            }
            let t = Tensor::new(&shape, data).map_err(|e| Error::format(rank_at, e.to_string()))?;
            store.insert(name, t)?;
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.pos as u64, format!("{} unexpected trailing bytes", r.remaining())));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
