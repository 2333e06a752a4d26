//! CT volume file (`.ctv`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset 0   magic  "CTV1"
//! offset 4   u32    slice count
//! offset 8   u32    height
//! offset 12  u32    width
//! offset 16  i16[n*h*w]  HU values, slice-major then row-major
//! ```
//!
//! File size must be exactly `16 + 2*n*h*w` bytes.

use crate::preprocess::HuSlice;
use crate::{Error, Result};
use std::path::Path;

pub const CTV_MAGIC: [u8; 4] = *b"CTV1";

/// Caps on header dimensions so a corrupt header cannot demand an absurd
/// allocation.
const MAX_SLICES: u32 = 65_536;
const MAX_SIDE: u32 = 16_384;

/// A CT volume: `n` slices of `height x width` HU values.
///
/// The container permits any positive dimensions; the preprocessing entry
/// point ([`HuVolume::slice`]) enforces the model-facing minimum of 8x8.
#[derive(Debug, Clone, PartialEq)]
pub struct HuVolume {
    height: usize,
    width: usize,
    data: Vec<i16>,
}

impl HuVolume {
    pub fn new(n_slices: usize, height: usize, width: usize, data: Vec<i16>) -> Result<Self> {
        if n_slices == 0 || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "volume dimensions {n_slices}x{height}x{width} must be positive"
            )));
        }
        if data.len() != n_slices * height * width {
            return Err(Error::Invalid(format!(
                "volume {n_slices}x{height}x{width} wants {} values, got {}",
                n_slices * height * width,
                data.len()
            )));
        }
        Ok(HuVolume { height, width, data })
    }

    pub fn from_slices(slices: &[HuSlice]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Invalid("volume needs at least one slice".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.height() != h || s.width() != w {
                return Err(Error::Invalid(format!(
                    "slice dimensions {}x{} differ from {h}x{w}",
                    s.height(),
                    s.width()
                )));
            }
            data.extend_from_slice(s.values());
        }
        HuVolume::new(slices.len(), h, w, data)
    }

    pub fn n_slices(&self) -> usize {
        self.data.len() / (self.height * self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[i16] {
        &self.data
    }

    /// Extracts one slice as preprocessing input (dimensions must meet the
    /// 8x8 minimum there).
    pub fn slice(&self, i: usize) -> Result<HuSlice> {
        if i >= self.n_slices() {
            return Err(Error::Invalid(format!(
                "slice {i} out of range; volume has {}",
                self.n_slices()
            )));
        }
        let hw = self.height * self.width;
        HuSlice::new(self.height, self.width, self.data[i * hw..(i + 1) * hw].to_vec())
    }
}

pub fn write_ctv(path: &Path, vol: &HuVolume) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 2 * vol.data.len());
    bytes.extend_from_slice(&CTV_MAGIC);
    bytes.extend_from_slice(&(vol.n_slices() as u32).to_le_bytes());
    bytes.extend_from_slice(&(vol.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(vol.width as u32).to_le_bytes());
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ctv(path: &Path) -> Result<HuVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ctv(&bytes, &path.display().to_string())
}

fn parse_ctv(bytes: &[u8], path: &str) -> Result<HuVolume> {
    if bytes.len() < 16 {
        return Err(Error::format_at(
            path,
            bytes.len() as u64,
            format!("truncated header: {} of 16 bytes", bytes.len()),
        ));
    }
    if bytes[0..4] != CTV_MAGIC {
        return Err(Error::format_at(
            path,
            0,
            format!("bad magic {:02x?}, want \"CTV1\"", &bytes[0..4]),
        ));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if n == 0 || n > MAX_SLICES {
        return Err(Error::format_at(path, 4, format!("slice count {n} out of range")));
    }
    if h == 0 || h > MAX_SIDE {
        return Err(Error::format_at(path, 8, format!("height {h} out of range")));
    }
    if w == 0 || w > MAX_SIDE {
        return Err(Error::format_at(path, 12, format!("width {w} out of range")));
    }
    let count = n as usize * h as usize * w as usize;
    let expected = 16 + 2 * count;
    if bytes.len() != expected {
        return Err(Error::format_at(
            path,
            bytes.len().min(expected) as u64,
            format!("file is {} bytes, {n}x{h}x{w} wants exactly {expected}", bytes.len()),
        ));
    }
    let data: Vec<i16> = bytes[16..]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    HuVolume::new(n as usize, h as usize, w as usize, data)
}
