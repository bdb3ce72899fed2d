//! Versioned binary checkpoint.
//!
//! ```text
//! magic    8 bytes  "SPKBEAM\n"
//! version  u32
//! meta     u32 byte length, then UTF-8 "key=value\n" lines
//! records  u32 count, then per record:
//!          u32 name length, name bytes,
//!          u32 rank, rank x u64 dims,
//!          prod(dims) x f64
//! ```
//!
//! All integers and floats are little-endian. The topology lives in the
//! meta block under `topology.*` keys.

use std::fs;
use std::path::Path;

use super::config::TopologyConfig;
use super::network::Model;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPKBEAM\n";
pub const VERSION: u32 = 1;

/// Model parameters plus free-form metadata and extra tensors (optimizer
/// state and the like).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    /// Insertion-ordered `key=value` metadata, excluding the topology.
    pub meta: Vec<(String, String)>,
    /// Tensors stored after the model parameters.
    pub extra: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            meta: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in self.model.config().to_pairs().iter().chain(&self.meta) {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let params = self.model.params();
        let count = params.len() + self.extra.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let records = params
            .iter()
            .chain(self.extra.iter().map(|(n, t)| (n.as_str(), t)));
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version} unsupported (expected {VERSION})"
            )));
        }
        let meta_len = r.u32("meta length")? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len, "meta")?)
            .map_err(|_| Error::Checkpoint("meta block is not UTF-8".into()))?;
        let mut pairs = Vec::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("meta line `{line}` lacks `=`")))?;
            pairs.push((k.to_string(), v.to_string()));
        }
        let topology = TopologyConfig::from_pairs(|k| {
            pairs.iter().find(|(a, _)| a == k).map(|(_, v)| v.as_str())
        })?;
        let meta = pairs
            .into_iter()
            .filter(|(k, _)| !k.starts_with("topology."))
            .collect();
        let mut model = Model::new(topology, 0)?;
        let count = r.u32("record count")? as usize;
        let mut extra = Vec::new();
        let mut loaded = 0;
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dim")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))?;
            if model.params().id(&name).is_some() {
                model.params_mut().set(&name, t)?;
                loaded += 1;
            } else {
                extra.push((name, t));
            }
        }
        if loaded != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "{} of {} parameters present",
                loaded,
                model.params().len()
            )));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { model, meta, extra })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
