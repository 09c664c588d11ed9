//! `DGRD` grid files and keypoint JSON.
//!
//! Grid layout: `b"DGRD"`, then little-endian `u32` height, width and dim,
//! then `height * width * dim` little-endian `f32` values in `(y, x, channel)`
//! order.

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DescError, DescriptorGrid, KeypointSet};
use crate::io::{read_json, write_json, FileError};

const MAGIC: &[u8; 4] = b"DGRD";
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum GridFormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, expected \"DGRD\"")]
    BadMagic,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error(transparent)]
    Invalid(#[from] DescError),
}

pub fn encode_grid(grid: &DescriptorGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [grid.height(), grid.width(), grid.dim()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<DescriptorGrid, GridFormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(GridFormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(GridFormatError::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (height, width, dim) = (read_u32(4), read_u32(8), read_u32(12));
    if height == 0 || width == 0 || dim == 0 {
        return Err(GridFormatError::DimensionMismatch(format!(
            "header declares empty grid {height}x{width}x{dim}"
        )));
    }
    let count = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| GridFormatError::DimensionMismatch("grid size overflows".into()))?;
    let expected = HEADER_LEN + count * 4;
    if bytes.len() < expected {
        return Err(GridFormatError::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(GridFormatError::DimensionMismatch(format!(
            "{} trailing bytes after {height}x{width}x{dim} payload",
            bytes.len() - expected
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DescriptorGrid::new(width, height, dim, data)?)
}

pub fn save_grid(grid: &DescriptorGrid, path: impl AsRef<Path>) -> Result<(), GridFormatError> {
    std::fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<DescriptorGrid, GridFormatError> {
    decode_grid(&std::fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct KeypointFile {
    image_size: [u32; 2],
    keypoints: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence: Option<Vec<f64>>,
}

impl KeypointSet {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FileError> {
        let file = KeypointFile {
            image_size: [self.image_size.0, self.image_size.1],
            keypoints: self.coords.iter().map(|p| [p.x, p.y]).collect(),
            confidence: self.confidence.clone(),
        };
        write_json(path.as_ref(), &file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FileError> {
        let path = path.as_ref();
        let f: KeypointFile = read_json(path)?;
        KeypointSet::new(
            f.keypoints.into_iter().map(Vector2::from).collect(),
            f.confidence,
            (f.image_size[0], f.image_size[1]),
        )
        .map_err(|e| FileError::Invalid(format!("{}: {e}", path.display())))
    }
}
