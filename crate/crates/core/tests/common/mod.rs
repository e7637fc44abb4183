//! Fixtures and independent reference implementations shared by the
//! integration tests. Nothing here calls into the library's numerics.
#![allow(dead_code)]

use attnpaint_core::mask::BinaryMask;
use attnpaint_core::pipeline::RgbImage;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

pub fn random_bits(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

/// Smooth colour ramp with some texture.
pub fn test_image(width: u32, height: u32) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        image::Rgb([
            ((x * 3 + y) % 256) as u8,
            ((y * 2 + 40) % 256) as u8,
            (((x ^ y) * 5) % 256) as u8,
        ])
    })
}

/// Rectangle covering rows `[h/4, 3h/4)` and columns `[w/3, 5w/6)`.
pub fn test_mask(width: usize, height: usize) -> BinaryMask {
    BinaryMask::new(
        height,
        width,
        (0..width * height)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                y >= height / 4 && y < 3 * height / 4 && x >= width / 3 && x < 5 * width / 6
            })
            .collect(),
    )
    .unwrap()
}

/// Row-wise softmax of `Q K^T / sqrt(d)`, written out with plain loops.
pub fn dense_softmax_attention(q: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let d = q.ncols() as f64;
    let mut out = Array2::zeros((q.nrows(), k.nrows()));
    for i in 0..q.nrows() {
        let logits: Vec<f64> = (0..k.nrows())
            .map(|j| (0..q.ncols()).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / d.sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..k.nrows() {
            out[[i, j]] = (logits[j] - m).exp() / z;
        }
    }
    out
}

pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            let aik = a[[i, k]];
            for j in 0..b.ncols() {
                out[[i, j]] += aik * b[[k, j]];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues in
/// descending order with unit eigenvectors as columns.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

/// Covariance of the rows of `x` (`p x p`, divided by the row count).
pub fn row_covariance(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (n, p) = x.dim();
    let mut centered = x.clone();
    for c in 0..p {
        let mean: f64 = (0..n).map(|r| x[[r, c]]).sum::<f64>() / n as f64;
        for r in 0..n {
            centered[[r, c]] -= mean;
        }
    }
    let mut cov = Array2::zeros((p, p));
    for i in 0..p {
        for j in i..p {
            let v: f64 = (0..n).map(|r| centered[[r, i]] * centered[[r, j]]).sum::<f64>() / n as f64;
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    (cov, centered)
}
