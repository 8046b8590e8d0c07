//! `FTW1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FTW1"                       4 bytes
//! tensor count                 u32
//! per tensor:
//!   name length                u16
//!   name                       UTF-8
//!   rank                       u8
//!   extents                    rank x u32
//!   values                     product(extents) x f32, row-major
//! meta count                   u16
//! per entry:
//!   key length, key            u16, UTF-8
//!   value length, value        u16, UTF-8
//! crc32 of all bytes above     u32
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTW1";

/// Named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, Tensor<f32>>,
    pub meta: IndexMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self.tensors.values().map(|t| t.len() * 4).sum();
        let mut out = Vec::with_capacity(payload + 64 * self.tensors.len() + 16);
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::CorruptCheckpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, tensor) in &self.tensors {
            put_str(&mut out, name)?;
            let rank = u8::try_from(tensor.rank())
                .map_err(|_| Error::CorruptCheckpoint(format!("tensor `{name}` rank too large")))?;
            out.push(rank);
            for &extent in tensor.shape() {
                let extent = u32::try_from(extent).map_err(|_| {
                    Error::CorruptCheckpoint(format!("tensor `{name}` extent too large"))
                })?;
                out.extend_from_slice(&extent.to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta_count = u16::try_from(self.meta.len())
            .map_err(|_| Error::CorruptCheckpoint("too many metadata entries".into()))?;
        out.extend_from_slice(&meta_count.to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 2 + 4 {
            return Err(Error::CorruptCheckpoint(format!(
                "{} bytes is shorter than an empty checkpoint",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::CorruptCheckpoint(format!(
                "crc mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let count = r.u32()? as usize;
        let mut tensors = IndexMap::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{name}` too large")))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("tensor `{name}` too large"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::CorruptCheckpoint(format!("tensor `{name}`: {e}")))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::CorruptCheckpoint(format!("duplicate tensor `{name}`")));
            }
        }
        let meta_count = r.u16()? as usize;
        let mut meta = IndexMap::with_capacity(meta_count);
        for _ in 0..meta_count {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes before crc",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Tensors whose names match a glob pattern, in file order.
    pub fn matching<'a>(&'a self, pattern: &str) -> Result<Vec<(&'a str, &'a Tensor<f32>)>> {
        let pattern = glob::Pattern::new(pattern)
            .map_err(|e| Error::InvalidConfig(format!("bad pattern: {e}")))?;
        Ok(self
            .tensors
            .iter()
            .filter(|(n, _)| pattern.matches(n))
            .map(|(n, t)| (n.as_str(), t))
            .collect())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::CorruptCheckpoint(format!("string of {} bytes too long", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("invalid UTF-8".into()))
    }
}

impl Network {
    /// Snapshot of every parameter, in declaration order.
    pub fn to_checkpoint(&self, meta: IndexMap<String, String>) -> Checkpoint {
        Checkpoint {
            tensors: self
                .params()
                .iter()
                .map(|(n, p)| (n.clone(), p.value.clone()))
                .collect(),
            meta,
        }
    }

    /// Copies every checkpoint tensor whose name is a parameter of this
    /// network. Strict mode requires all parameters to be present. Nothing
    /// is modified when an error is returned.
    pub fn apply_checkpoint(&mut self, ckpt: &Checkpoint, strict: bool) -> Result<usize> {
        let mut hits = Vec::new();
        for (name, param) in self.params() {
            match ckpt.tensors.get(name) {
                Some(t) if t.shape() != param.value.shape() => {
                    return Err(Error::ShapeMismatch(format!(
                        "checkpoint tensor `{name}` has shape {:?}, network expects {:?}",
                        t.shape(),
                        param.value.shape()
                    )))
                }
                Some(_) => hits.push(name.clone()),
                None if strict => return Err(Error::MissingTensor(name.clone())),
                None => {}
            }
        }
        for name in &hits {
            let src = &ckpt.tensors[name];
            self.param_mut(name)
                .expect("name came from params")
                .value
                .data_mut()
                .copy_from_slice(src.data());
        }
        Ok(hits.len())
    }
}

pub fn save_checkpoint(
    net: &Network,
    meta: IndexMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    net.to_checkpoint(meta).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

pub fn apply_checkpoint(net: &mut Network, ckpt: &Checkpoint, strict: bool) -> Result<usize> {
    net.apply_checkpoint(ckpt, strict)
}
