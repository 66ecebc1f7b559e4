//! Binary checkpoint container for every trained component.
//!
//! Layout (little endian): `HEDCKPT\0`, u32 version, kind string, u32 meta
//! count and `key, value` strings, u32 tensor count and per tensor a name,
//! u32 rank, u64 dims and f64 data, then a u64 FNV-1a digest of everything
//! before it. Strings are u32 length plus UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use hyperedit_core::nn::{load_values, named_values, Module};
use hyperedit_core::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HEDCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h = (h ^ *b as u64).wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.pos + n <= self.buf.len(), "checkpoint truncated at byte {}", self.pos);
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        Ok(String::from_utf8(self.take(n)?.to_vec())?)
    }
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint { kind: kind.to_string(), meta: BTreeMap::new(), tensors: BTreeMap::new() }
    }

    pub fn from_module<M: Module + ?Sized>(kind: &str, m: &M) -> Self {
        let mut c = Self::new(kind);
        c.tensors = named_values(m).into_iter().collect();
        c
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).with_context(|| format!("{} checkpoint lacks '{key}'", self.kind))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.meta(key)?;
        v.parse().map_err(|e| anyhow::anyhow!("bad '{key}' value '{v}': {e}"))
    }

    pub fn meta_list(&self, key: &str) -> Result<Vec<usize>> {
        parse_list(self.meta(key)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        ensure!(self.kind == kind, "expected a {kind} checkpoint, found {}", self.kind);
        Ok(())
    }

    /// Copies every stored tensor into `m`; names and shapes must match exactly.
    pub fn load_into<M: Module + ?Sized>(&self, m: &mut M) -> Result<()> {
        load_values(m, &self.tensors).map_err(|e| anyhow::anyhow!("{} checkpoint: {e}", self.kind))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.dims() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = fnv(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        ensure!(buf.len() >= MAGIC.len() + 12, "file too short to be a checkpoint");
        ensure!(&buf[..8] == MAGIC, "not a checkpoint file (bad magic)");
        let (body, tail) = buf.split_at(buf.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into()?);
        ensure!(fnv(body) == stored, "checkpoint digest mismatch (file corrupt)");
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            bail!("unsupported checkpoint version {version} (expected {VERSION})");
        }
        let kind = r.string()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(name, Tensor::new(&shape, data));
        }
        ensure!(r.pos == body.len(), "trailing bytes after checkpoint tensors");
        Ok(Checkpoint { kind, meta, tensors })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&buf).with_context(|| format!("loading {}", path.display()))
    }
}

pub fn format_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse::<usize>().with_context(|| format!("bad list entry '{p}'"))).collect()
}
