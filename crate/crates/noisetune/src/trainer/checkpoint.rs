//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"NTCK"
//! version u32
//! seed    u64
//! step    u64
//! config  u64 length + UTF-8 bytes (TOML echo of the run configuration)
//! layers  u64 count + u64 layer indices (the SNR selection)
//! params  u64 count, then per entry:
//!         name (u64 length + UTF-8), shape (u64 ndim + u64 dims),
//!         data (f64 * numel)
//! adam    u64 count, then per entry:
//!         name, u64 length, m (f64 * length), v (f64 * length)
//! ```
//!
//! Entries are sorted by name (`BTreeMap`), so identical states serialize
//! to identical bytes. Writes go to a sibling temp file first and are
//! renamed into place, so a crash never leaves a half-written checkpoint
//! under the final name.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub config_echo: String,
    pub selected_layers: Vec<usize>,
    /// name -> (shape, data)
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub adam: BTreeMap<String, AdamMoments>,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        // Any real length fits well under the file size; reject nonsense
        // early instead of trying a huge allocation.
        if v > self.bytes.len() as u64 {
            return Err(Error::Parse(format!("implausible length {v} in checkpoint")));
        }
        Ok(v as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Parse(format!("checkpoint string is not UTF-8: {e}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_u64(&mut buf, self.seed);
        put_u64(&mut buf, self.step);
        put_str(&mut buf, &self.config_echo);
        put_u64(&mut buf, self.selected_layers.len() as u64);
        for &l in &self.selected_layers {
            put_u64(&mut buf, l as u64);
        }
        put_u64(&mut buf, self.params.len() as u64);
        for (name, (shape, data)) in &self.params {
            put_str(&mut buf, name);
            put_u64(&mut buf, shape.len() as u64);
            for &d in shape {
                put_u64(&mut buf, d as u64);
            }
            put_f64s(&mut buf, data);
        }
        put_u64(&mut buf, self.adam.len() as u64);
        for (name, mom) in &self.adam {
            put_str(&mut buf, name);
            put_u64(&mut buf, mom.m.len() as u64);
            put_f64s(&mut buf, &mom.m);
            put_f64s(&mut buf, &mom.v);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let seed = r.u64()?;
        let step = r.u64()?;
        let config_echo = r.string()?;
        let n_layers = r.len()?;
        let mut selected_layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            selected_layers.push(r.u64()? as usize);
        }
        let n_params = r.len()?;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let ndim = r.len()?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel)?;
            params.insert(name, (shape, data));
        }
        let n_adam = r.len()?;
        let mut adam = BTreeMap::new();
        for _ in 0..n_adam {
            let name = r.string()?;
            let len = r.len()?;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            adam.insert(name, AdamMoments { m, v });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            seed,
            step,
            config_echo,
            selected_layers,
            params,
            adam,
        })
    }

    /// Write atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}
