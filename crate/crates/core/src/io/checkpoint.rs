//! Named-array checkpoint container (`.ckpt`).
//!
//! Stores uniquely named `f32` arrays with shapes. Model weights live in
//! `f64` in memory, so a save/load round trip is exact at 32-bit precision
//! by design. Layout, little-endian:
//!
//! ```text
//! offset 0  magic  "IHDW"
//! offset 4  u16    format version (currently 1)
//! offset 6  u32    entry count
//! then per entry:
//!           u16    name length in bytes
//!           [u8]   UTF-8 name
//!           u8     rank
//!           u32[rank]  dims
//!           f32[prod(dims)]  values
//! ```
//!
//! An empty container is exactly 10 bytes.

use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IHDW";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Guard against corrupt headers demanding huge allocations.
const MAX_ELEMENTS: u64 = 1 << 28;

/// In-memory checkpoint: ordered, uniquely named f32 arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, dims: &[usize], data: Vec<f32>) -> Result<()> {
        if self.entries.iter().any(|(n, _, _)| n == name) {
            return Err(Error::Invalid(format!("duplicate checkpoint entry {name:?}")));
        }
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Invalid(format!("entry name length {} out of range", name.len())));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Invalid(format!("entry rank {} out of range", dims.len())));
        }
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(Error::Invalid(format!(
                "entry {name:?}: dims {dims:?} want {count} values, got {}",
                data.len()
            )));
        }
        self.entries.push((name.to_string(), dims.to_vec(), data));
        Ok(())
    }

    /// Stores an `f64` tensor, casting to `f32`.
    pub fn add_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.add(name, t.shape(), t.data().iter().map(|&v| v as f32).collect())
    }

    /// Stores every parameter under `prefix.name`.
    pub fn add_params(&mut self, prefix: &str, params: &ParamSet) -> Result<()> {
        for (name, t) in params.iter() {
            self.add_tensor(&format!("{prefix}.{name}"), t)?;
        }
        Ok(())
    }

    /// Stores a list of scalars (metadata like config fields; integers up
    /// to 2^24 survive the f32 cast exactly).
    pub fn add_scalars(&mut self, name: &str, values: &[f64]) -> Result<()> {
        self.add(name, &[values.len()], values.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, d, v)| (d.as_slice(), v.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Required entry as an `f64` tensor.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (dims, data) = self
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint entry {name:?} missing")))?;
        Tensor::from_vec(dims, data.iter().map(|&v| f64::from(v)).collect())
    }

    /// Required entry as a flat f64 vector.
    pub fn scalars(&self, name: &str) -> Result<Vec<f64>> {
        let (_, data) = self
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint entry {name:?} missing")))?;
        Ok(data.iter().map(|&v| f64::from(v)).collect())
    }

    /// Loads `prefix.name` entries back into an existing parameter set,
    /// which must match by name and shape.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.iter_mut() {
            let full = format!("{prefix}.{name}");
            let (dims, data) = self
                .get(&full)
                .ok_or_else(|| Error::Invalid(format!("checkpoint entry {full:?} missing")))?;
            if dims != t.shape() {
                return Err(Error::Invalid(format!(
                    "checkpoint entry {full:?} shape {dims:?} vs model {:?}",
                    t.shape()
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(data) {
                *dst = f64::from(src);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, dims, data) in &self.entries {
            bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(dims.len() as u8);
            for &d in dims {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, &path.display().to_string())
    }

    fn parse(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format_at(
                path,
                0,
                format!("bad magic {magic:02x?}, want \"IHDW\""),
            ));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format_at(
                path,
                4,
                format!("unsupported version {version}, this build reads {CHECKPOINT_VERSION}"),
            ));
        }
        let count = r.u32("entry count")?;
        let mut ckpt = Checkpoint::new();
        for i in 0..count {
            let name_at = r.at;
            let name_len = r.u16("name length")? as usize;
            let name_bytes = r.take(name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| {
                    Error::format_at(path, name_at as u64, format!("entry {i}: name is not UTF-8"))
                })?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            let mut total: u64 = 1;
            for _ in 0..rank {
                let d = r.u32("dimension")? as u64;
                total = total.saturating_mul(d);
                dims.push(d as usize);
            }
            if total > MAX_ELEMENTS {
                return Err(Error::format_at(
                    path,
                    r.at as u64,
                    format!("entry {name:?}: {total} elements exceeds limit"),
                ));
            }
            let data_bytes = r.take(total as usize * 4, "values")?;
            let data: Vec<f32> = data_bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ckpt.add(&name, &dims, data)
                .map_err(|e| Error::format_at(path, name_at as u64, e.to_string()))?;
        }
        if r.at != bytes.len() {
            return Err(Error::format_at(
                path,
                r.at as u64,
                format!("{} trailing bytes after the last entry", bytes.len() - r.at),
            ));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format_at(
                self.path,
                self.bytes.len() as u64,
                format!(
                    "truncated while reading {what}: want {n} bytes at offset {}",
                    self.at
                ),
            ));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
