//! Channel-first latent grids and their patch-matrix view.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// A `(channels, height, width)` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Array3<f64>,
}

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// `HW x C` matrix, one row per patch in row-major order.
    pub fn to_patches(&self) -> Array2<f64> {
        let (c, h, w) = self.shape();
        Array2::from_shape_fn((h * w, c), |(p, ch)| self.data[[ch, p / w, p % w]])
    }

    pub fn from_patches(patches: &Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if patches.nrows() != height * width {
            return Err(Error::invalid(format!(
                "{} patches cannot fill a {height}x{width} grid",
                patches.nrows()
            )));
        }
        let c = patches.ncols();
        Ok(Self {
            data: Array3::from_shape_fn((c, height, width), |(ch, i, j)| {
                patches[[i * width + j, ch]]
            }),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference over positions where `select(row, col)` holds.
    pub fn max_abs_diff_where(&self, other: &Latent, select: impl Fn(usize, usize) -> bool) -> f64 {
        self.data
            .indexed_iter()
            .filter(|((_, i, j), _)| select(*i, *j))
            .map(|((c, i, j), v)| (v - other.data[[c, i, j]]).abs())
            .fold(0.0, f64::max)
    }

    /// Max abs difference inside (`masked = true`) or outside the mask.
    pub fn max_abs_diff_in_region(&self, other: &Latent, mask: &BinaryMask, masked: bool) -> f64 {
        self.max_abs_diff_where(other, |i, j| mask.get(i, j) == masked)
    }
}
