//! Mask representations shared by every mechanism.
//!
//! All `HW`-indexed vectors in this crate are row-major: patch `(i, j)` of an
//! `H x W` grid sits at index `i * W + j`.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// A binary `H x W` mask. `true` marks the region to inpaint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "mask dimensions must be at least 1x1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Builds a mask from `0/1` values; anything else is rejected.
    pub fn from_u8(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::invalid(format!("mask value {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, bits)
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged mask rows"));
        }
        let flat: Vec<u8> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_u8(height, width, &flat)
    }

    pub fn filled(height: usize, width: usize, masked: bool) -> Result<Self> {
        Self::new(height, width, vec![masked; height * width])
    }

    /// Thresholds an 8-bit single-channel image: `>= 128` is masked.
    pub fn from_luma(img: &image::GrayImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let values = img.pixels().map(|p| p.0[0] >= 128).collect();
        Self::new(h as usize, w as usize, values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_luma(&img.to_luma8())
    }

    pub fn to_luma(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn masked_count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_all_masked(&self) -> bool {
        self.values.iter().all(|&v| v)
    }

    pub fn is_all_unmasked(&self) -> bool {
        self.values.iter().all(|&v| !v)
    }

    /// Swaps the masked and unmasked regions.
    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| !v).collect(),
        }
    }
}

/// Row-major flattening of a [`BinaryMask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatMask {
    values: Vec<bool>,
    resolution: (usize, usize),
}

impl FlatMask {
    pub fn new(values: Vec<bool>, resolution: (usize, usize)) -> Result<Self> {
        if values.len() != resolution.0 * resolution.1 {
            return Err(Error::invalid(format!(
                "flat mask length {} does not match resolution {}x{}",
                values.len(),
                resolution.0,
                resolution.1
            )));
        }
        Ok(Self { values, resolution })
    }

    /// A single-row flat mask, convenient for small hand-built cases.
    pub fn from_bits(bits: &[u8]) -> Self {
        Self {
            values: bits.iter().map(|&b| b != 0).collect(),
            resolution: (1, bits.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.values[index]
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn value(&self, index: usize) -> f64 {
        if self.values[index] {
            1.0
        } else {
            0.0
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.value(i)).collect()
    }

    pub fn unmasked_count(&self) -> usize {
        self.values.iter().filter(|&&v| !v).count()
    }

    /// Inverse of [`flatten_mask`].
    pub fn reshape(&self) -> BinaryMask {
        BinaryMask {
            height: self.resolution.0,
            width: self.resolution.1,
            values: self.values.clone(),
        }
    }
}

/// `(1 - tau) * M_f + tau / HW`, the smoothed mask driving self-attention reweighting.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMaskVector {
    values: Vec<f64>,
    tau: f64,
    resolution: (usize, usize),
}

impl SoftMaskVector {
    /// Wraps precomputed soft values, e.g. a sub-vector of a larger soft mask.
    pub fn from_values(values: Vec<f64>, tau: f64, resolution: (usize, usize)) -> Result<Self> {
        if values.len() != resolution.0 * resolution.1 {
            return Err(Error::invalid("soft mask length does not match its resolution"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("soft mask values must lie in [0, 1]"));
        }
        Ok(Self {
            values,
            tau,
            resolution,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    /// Weight applied to attention entry `(i, j)`:
    /// `m_i m_j + (1 - m_i)(1 - m_j)`.
    #[inline]
    pub fn pair_weight(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.values[i], self.values[j]);
        a * b + (1.0 - a) * (1.0 - b)
    }
}

/// Resizes by area-averaging the mask over each target cell and thresholding
/// at coverage `>= 0.5` (exact ties count as masked).
///
/// Works for both down- and upsampling and for non-integer ratios. Coverage is
/// computed in integer arithmetic, so the threshold is exact.
pub fn resize_mask(mask: &BinaryMask, target: (usize, usize)) -> Result<BinaryMask> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid(format!(
            "resize target must be at least 1x1, got {th}x{tw}"
        )));
    }
    let (sh, sw) = mask.resolution();
    if (sh, sw) == target {
        return Ok(mask.clone());
    }
    // Target cell i spans [i*sh, (i+1)*sh) and source row r spans [r*th, (r+1)*th),
    // both measured in units of 1/th source rows (same for columns).
    let row_overlaps = axis_overlaps(sh, th);
    let col_overlaps = axis_overlaps(sw, tw);
    let cell_area = (sh * sw) as u64;
    let mut values = Vec::with_capacity(th * tw);
    for rows in &row_overlaps {
        for cols in &col_overlaps {
            let mut covered = 0u64;
            for &(r, wr) in rows {
                for &(c, wc) in cols {
                    if mask.get(r, c) {
                        covered += wr * wc;
                    }
                }
            }
            values.push(2 * covered >= cell_area);
        }
    }
    BinaryMask::new(th, tw, values)
}

fn axis_overlaps(source: usize, target: usize) -> Vec<Vec<(usize, u64)>> {
    (0..target)
        .map(|i| {
            let lo = i * source;
            let hi = (i + 1) * source;
            let first = lo / target;
            let last = (hi - 1) / target;
            (first..=last)
                .filter_map(|r| {
                    let s_lo = r * target;
                    let s_hi = (r + 1) * target;
                    let overlap = hi.min(s_hi).saturating_sub(lo.max(s_lo));
                    (overlap > 0).then_some((r, overlap as u64))
                })
                .collect()
        })
        .collect()
}

pub fn flatten_mask(mask: &BinaryMask) -> FlatMask {
    FlatMask {
        values: mask.values.clone(),
        resolution: mask.resolution(),
    }
}

pub fn soften_mask(mf: &FlatMask, tau: f64) -> Result<SoftMaskVector> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1), got {tau}")));
    }
    let hw = mf.len() as f64;
    let values = (0..mf.len())
        .map(|i| (1.0 - tau) * mf.value(i) + tau / hw)
        .collect();
    Ok(SoftMaskVector {
        values,
        tau,
        resolution: mf.resolution(),
    })
}

/// Materializes `(M M^T, (1 - M)(1 - M)^T)`.
///
/// Only for tests and diagnostics: [`crate::sams`] applies the same weighting
/// entry by entry without building either matrix.
pub fn region_weights(softmask: &SoftMaskVector) -> (Array2<f64>, Array2<f64>) {
    let m = softmask.values();
    let n = m.len();
    let inside = Array2::from_shape_fn((n, n), |(i, j)| m[i] * m[j]);
    let outside = Array2::from_shape_fn((n, n), |(i, j)| (1.0 - m[i]) * (1.0 - m[j]));
    (inside, outside)
}
