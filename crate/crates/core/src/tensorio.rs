//! Binary array container shared by datasets and checkpoints.
//!
//! Every array is stored as a fixed 64-byte little-endian header followed by
//! the row-major payload:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `W2CA`                            |
//! | 4      | 2    | format version (currently 1)            |
//! | 6      | 2    | dtype code (1 = f32, 2 = f64)           |
//! | 8      | 4    | rank (0..=6)                            |
//! | 12     | 48   | six u64 dims, unused trailing dims = 0  |
//! | 60     | 4    | reserved, zero                          |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"W2CA";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;
pub const MAX_RANK: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum DTypeCode {
    F32 = 1,
    F64 = 2,
}

impl DTypeCode {
    fn from_u16(code: u16) -> Option<Self> {
        match code {
            1 => Some(DTypeCode::F32),
            2 => Some(DTypeCode::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DTypeCode::F32 => 4,
            DTypeCode::F64 => 8,
        }
    }
}

/// A decoded array. Payload is widened to f64 when the file stores f64,
/// otherwise kept as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayRecord {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayRecord {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            dims,
            data: ArrayData::F32(data),
        }
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            dims,
            data: ArrayData::F64(data),
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            ArrayData::F32(v) => v.clone(),
            ArrayData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.len() > MAX_RANK {
            return Err(Error::dim(format!(
                "rank {} exceeds maximum {MAX_RANK}",
                self.dims.len()
            )));
        }
        let expected: usize = self.dims.iter().product();
        if expected != self.len() {
            return Err(Error::dim(format!(
                "dims {:?} imply {expected} elements, payload has {}",
                self.dims,
                self.len()
            )));
        }
        let code = match self.data {
            ArrayData::F32(_) => DTypeCode::F32,
            ArrayData::F64(_) => DTypeCode::F64,
        };
        let mut out = Vec::with_capacity(HEADER_LEN + expected * code.width());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(code as u16).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for i in 0..MAX_RANK {
            let d = self.dims.get(i).copied().unwrap_or(0) as u64;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&[0u8; 4]);
        debug_assert_eq!(out.len(), HEADER_LEN);
        match &self.data {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("truncated header ({} bytes)", bytes.len()));
        }
        if bytes[0..4] != MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let code = u16::from_le_bytes([bytes[6], bytes[7]]);
        let code = DTypeCode::from_u16(code).ok_or_else(|| format!("unknown dtype code {code}"))?;
        let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if rank > MAX_RANK {
            return Err(format!("rank {rank} exceeds {MAX_RANK}"));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| {
                let off = 12 + 8 * i;
                u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize
            })
            .collect();
        let count: usize = dims.iter().product();
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != count * code.width() {
            return Err(format!(
                "payload is {} bytes, dims {dims:?} need {}",
                payload.len(),
                count * code.width()
            ));
        }
        let data = match code {
            DTypeCode::F32 => ArrayData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DTypeCode::F64 => ArrayData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}
