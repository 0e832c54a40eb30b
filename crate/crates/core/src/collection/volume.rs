//! `MTVL` volume files.
//!
//! Little-endian layout:
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `MTVL`                            |
//! | 4     | version, u32 = 1                        |
//! | 4     | dtype, u32 (0 = float32, 1 = uint8)     |
//! | 24    | shape X, Y, Z as u64                    |
//! | 24    | spacing X, Y, Z as f64 (mm)             |
//! | ...   | voxels, X fastest                       |

use std::io::Write;
use std::path::Path;

use super::Grid3;
use crate::{Error, Result};

pub const MTVL_MAGIC: &[u8; 4] = b"MTVL";
pub const MTVL_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Grid3<f32>),
    U8(Grid3<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: VolumeData,
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn f32(grid: Grid3<f32>, spacing: [f64; 3]) -> Self {
        Volume {
            data: VolumeData::F32(grid),
            spacing,
        }
    }

    pub fn u8(grid: Grid3<u8>, spacing: [f64; 3]) -> Self {
        Volume {
            data: VolumeData::U8(grid),
            spacing,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        match &self.data {
            VolumeData::F32(g) => g.shape(),
            VolumeData::U8(g) => g.shape(),
        }
    }

    /// Intensity view; uint8 volumes are widened.
    pub fn into_f32(self) -> Grid3<f32> {
        match self.data {
            VolumeData::F32(g) => g,
            VolumeData::U8(g) => g.map(f32::from),
        }
    }

    /// Mask view; float volumes are thresholded at 0.5.
    pub fn into_mask(self) -> Grid3<u8> {
        match self.data {
            VolumeData::U8(g) => g,
            VolumeData::F32(g) => g.map(|v| u8::from(v >= 0.5)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let (dtype, payload_len) = match &self.data {
            VolumeData::F32(g) => (0u32, g.len() * 4),
            VolumeData::U8(g) => (1u32, g.len()),
        };
        let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
        out.extend_from_slice(MTVL_MAGIC);
        out.extend_from_slice(&MTVL_VERSION.to_le_bytes());
        out.extend_from_slice(&dtype.to_le_bytes());
        for s in shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        match &self.data {
            VolumeData::F32(g) => g.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            VolumeData::U8(g) => out.extend_from_slice(g.data()),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MTVL_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != MTVL_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dtype = u32_at(8);
        let mut shape = [0usize; 3];
        for (i, s) in shape.iter_mut().enumerate() {
            let v = u64_at(12 + 8 * i);
            if v == 0 {
                return Err(Error::Format("non-positive dimension".into()));
            }
            *s = usize::try_from(v).map_err(|_| Error::Format("dimension overflow".into()))?;
        }
        let spacing = [f64_at(36), f64_at(44), f64_at(52)];
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        let data = match dtype {
            0 => {
                if payload.len() != count * 4 {
                    return Err(Error::Format(format!(
                        "truncated payload: expected {} bytes, found {}",
                        count * 4,
                        payload.len()
                    )));
                }
                let v = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                VolumeData::F32(Grid3::from_vec(shape, v).unwrap())
            }
            1 => {
                if payload.len() != count {
                    return Err(Error::Format(format!(
                        "truncated payload: expected {count} bytes, found {}",
                        payload.len()
                    )));
                }
                VolumeData::U8(Grid3::from_vec(shape, payload.to_vec()).unwrap())
            }
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        Ok(Volume { data, spacing })
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&volume.to_bytes()).map_err(|e| Error::io(path, e))
}
