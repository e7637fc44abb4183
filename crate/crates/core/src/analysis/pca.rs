//! Three-component PCA of an attention map, rendered as an RGB image.
//!
//! Rows of the map are the samples (one per patch, each its outgoing
//! attention distribution). The decomposition runs on whichever of the
//! covariance or Gram matrix is smaller.

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Variances at or below this fraction of the total count as absent.
const DEGENERATE_RATIO: f64 = 1e-10;
const DEGENERATE_ABS: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaImage {
    pub resolution: (usize, usize),
    /// `H x W x 3`, each channel min-max scaled to `[0, 1]`.
    pub channels: Array3<f64>,
    /// Unscaled projections, `HW x 3`.
    pub projections: Array2<f64>,
    pub explained_variance: [f64; 3],
    /// Unit-norm principal directions for the non-degenerate channels.
    pub components: Vec<Array1<f64>>,
    pub degenerate: [bool; 3],
}

impl PcaImage {
    pub fn is_degenerate(&self) -> bool {
        self.degenerate.iter().any(|d| *d)
    }

    pub fn to_image(&self) -> RgbImage {
        let (h, w) = self.resolution;
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |k: usize| (self.channels[[y as usize, x as usize, k]] * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigenpairs sorted by descending eigenvalue.
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, Vec<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, &val)| (val, eig.eigenvectors.column(k).iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

fn fix_sign(v: &mut Array1<f64>) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

pub fn pca_rgb(map: &Array2<f64>, resolution: (usize, usize)) -> Result<PcaImage> {
    let (h, w) = resolution;
    let (n, p) = map.dim();
    if n != h * w {
        return Err(Error::invalid(format!(
            "map has {n} rows but resolution {h}x{w} has {} patches",
            h * w
        )));
    }
    if n < 3 || p == 0 {
        return Err(Error::invalid(format!("PCA needs at least 3 patches, got {n}")));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention map passed to PCA".into()));
    }
    let mean = map.mean_axis(Axis(0)).expect("n >= 3");
    let centered = map - &mean;
    let total: f64 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;

    let mut explained_variance = [0.0; 3];
    let mut degenerate = [true; 3];
    let mut components = Vec::new();
    let mut projections = Array2::zeros((n, 3));
    let pairs = if n <= p {
        sorted_eigen(to_dmatrix(&centered.dot(&centered.t())) / n as f64)
    } else {
        sorted_eigen(to_dmatrix(&centered.t().dot(&centered)) / n as f64)
    };
    for (k, (val, vec)) in pairs.into_iter().take(3).enumerate() {
        let var = val.max(0.0);
        explained_variance[k] = var;
        if var <= DEGENERATE_RATIO * total || total <= DEGENERATE_ABS {
            continue;
        }
        let vec = Array1::from(vec);
        let mut component = if n <= p {
            // Gram eigenvector u maps to the direction Xc^T u / sqrt(n var).
            centered.t().dot(&vec) / (n as f64 * var).sqrt()
        } else {
            vec
        };
        fix_sign(&mut component);
        projections.column_mut(k).assign(&centered.dot(&component));
        components.push(component);
        degenerate[k] = false;
    }

    let mut channels = Array3::zeros((h, w, 3));
    for k in 0..3 {
        let col = projections.column(k);
        let lo = col.fold(f64::INFINITY, |m, &v| m.min(v));
        let hi = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if hi > lo {
            for (idx, &v) in col.iter().enumerate() {
                channels[[idx / w, idx % w, k]] = (v - lo) / (hi - lo);
            }
        }
    }
    Ok(PcaImage {
        resolution,
        channels,
        projections,
        explained_variance,
        components,
        degenerate,
    })
}
