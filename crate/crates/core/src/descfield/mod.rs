//! Descriptor sampling from dense feature grids.
//!
//! A matcher in this crate is fed keypoint coordinates only; descriptors are
//! read out of a dense `height x width x dim` field at those coordinates.
//! Grid cell `(row i, col j)` holds the value at continuous position
//! `(x = j, y = i)`.

mod format;
mod oracle;

pub use format::{decode_grid, encode_grid, load_grid, save_grid, GridFormatError};
pub use oracle::{oracle_grid, scene_keypoints, SceneKeypoints};

use nalgebra::{DMatrix, Vector2};
use thiserror::Error;

/// Default descriptor width.
pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescError {
    #[error("keypoint {0} lies outside the grid")]
    OutOfBounds(usize),
    #[error("interpolated descriptor {0} has zero norm")]
    ZeroVector(usize),
    #[error("grid shape {height}x{width}x{dim} does not match {len} values")]
    BadShape {
        width: usize,
        height: usize,
        dim: usize,
        len: usize,
    },
    #[error("grid contains non-finite values")]
    NonFinite,
    #[error("keypoint {0} lies outside the image bounds")]
    KeypointOutOfImage(usize),
    #[error("confidence has {got} entries for {expected} keypoints")]
    ConfidenceLength { expected: usize, got: usize },
}

/// Dense feature field.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrid {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f32>,
}

impl DescriptorGrid {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f32>) -> Result<Self, DescError> {
        if dim == 0 || width == 0 || height == 0 || data.len() != width * height * dim {
            return Err(DescError::BadShape {
                width,
                height,
                dim,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DescError::NonFinite);
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `(y, x, channel)` values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub(crate) fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let start = (y * self.width + x) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    /// Bilinear interpolation at `p`, unnormalized. Positions past the last
    /// lattice point clamp to the border cell.
    pub fn interpolate(&self, p: &Vector2<f64>, out: &mut [f64]) {
        let (x0, x1, fx) = lattice(p.x, self.width);
        let (y0, y1, fy) = lattice(p.y, self.height);
        out.iter_mut().for_each(|v| *v = 0.0);
        let corners = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ];
        for (x, y, w) in corners {
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.cell(x, y)) {
                *o += w * v as f64;
            }
        }
    }
}

/// Lower/upper lattice index and fractional weight along one axis.
pub(crate) fn lattice(v: f64, size: usize) -> (usize, usize, f64) {
    let last = size - 1;
    let lo = v.floor().max(0.0) as usize;
    if lo >= last {
        (last, last, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}

/// Keypoint coordinates of one image with optional detector confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub coords: Vec<Vector2<f64>>,
    pub confidence: Option<Vec<f64>>,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
}

impl KeypointSet {
    pub fn new(
        coords: Vec<Vector2<f64>>,
        confidence: Option<Vec<f64>>,
        image_size: (u32, u32),
    ) -> Result<Self, DescError> {
        let kps = Self {
            coords,
            confidence,
            image_size,
        };
        kps.validate()?;
        Ok(kps)
    }

    pub fn validate(&self) -> Result<(), DescError> {
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        if let Some(i) = self
            .coords
            .iter()
            .position(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x < w && p.y < h))
        {
            return Err(DescError::KeypointOutOfImage(i));
        }
        if let Some(c) = &self.confidence {
            if c.len() != self.coords.len() {
                return Err(DescError::ConfidenceLength {
                    expected: self.coords.len(),
                    got: c.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn with_confidence(&self, confidence: Option<Vec<f64>>) -> Self {
        Self {
            confidence,
            ..self.clone()
        }
    }

    /// Subset in the given order.
    pub fn select(&self, order: &[usize]) -> Self {
        Self {
            coords: order.iter().map(|&i| self.coords[i]).collect(),
            confidence: self
                .confidence
                .as_ref()
                .map(|c| order.iter().map(|&i| c[i]).collect()),
            image_size: self.image_size,
        }
    }
}

/// Unit-norm descriptors, one row per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet(pub DMatrix<f64>);

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Bilinear readout at every keypoint followed by L2 normalization. The
/// confidence field is never read.
pub fn sample_descriptors(
    grid: &DescriptorGrid,
    kps: &KeypointSet,
) -> Result<DescriptorSet, DescError> {
    let mut out = DMatrix::zeros(kps.coords.len(), grid.dim());
    let mut buf = vec![0.0; grid.dim()];
    for (i, p) in kps.coords.iter().enumerate() {
        if !grid.contains(p) {
            return Err(DescError::OutOfBounds(i));
        }
        grid.interpolate(p, &mut buf);
        let norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(DescError::ZeroVector(i));
        }
        for (c, v) in buf.iter().enumerate() {
            out[(i, c)] = v / norm;
        }
    }
    Ok(DescriptorSet(out))
}
