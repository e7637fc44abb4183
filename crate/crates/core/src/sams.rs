//! Self-attention masking: post-softmax reweighting that keeps masked patches
//! attending to masked patches and unmasked patches attending to unmasked ones.
//!
//! For a soft mask `m` the weighted map is
//! `A_hat[i][j] = (m_i m_j + (1 - m_i)(1 - m_j)) * A[i][j]`.
//! With a hard mask (`tau = 0`) cross-region entries become exactly zero. Rows
//! are not renormalized unless [`SamsOptions::renormalize`] is set.

use ndarray::{Array2, Axis, Zip};

use crate::attention::{attention_weights, check_qkv, scores_backward, softmax_backward};
use crate::error::{Error, Result};
use crate::mask::SoftMaskVector;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionMap {
    pub weights: Array2<f64>,
    pub resolution: (usize, usize),
    pub layer_index: usize,
    pub timestep: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SamsOptions {
    /// Rescale each modified row back to unit mass. Off by default.
    pub renormalize: bool,
}

fn check_len(n: usize, softmask: &SoftMaskVector) -> Result<()> {
    if softmask.len() != n {
        return Err(Error::invalid(format!(
            "soft mask has {} entries but attention has {n} patches",
            softmask.len()
        )));
    }
    Ok(())
}

/// Applies the region weighting to a square weight matrix.
pub fn apply_sams_weights(
    weights: &Array2<f64>,
    softmask: &SoftMaskVector,
    options: SamsOptions,
) -> Result<Array2<f64>> {
    let n = weights.nrows();
    if weights.ncols() != n {
        return Err(Error::invalid(format!(
            "self-attention map must be square, got {}x{}",
            n,
            weights.ncols()
        )));
    }
    check_len(n, softmask)?;
    let mut out = weights.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v *= softmask.pair_weight(i, j);
    }
    if options.renormalize {
        for mut row in out.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
    }
    Ok(out)
}

pub fn apply_sams(attn: &SelfAttentionMap, softmask: &SoftMaskVector) -> Result<SelfAttentionMap> {
    let (h, w) = attn.resolution;
    if h * w != attn.weights.nrows() {
        return Err(Error::invalid(format!(
            "resolution {h}x{w} does not match a {}-patch map",
            attn.weights.nrows()
        )));
    }
    Ok(SelfAttentionMap {
        weights: apply_sams_weights(&attn.weights, softmask, SamsOptions::default())?,
        ..attn.clone()
    })
}

/// Forward state kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct SamsForward {
    pub output: Array2<f64>,
    /// Softmax weights before reweighting.
    pub weights: Array2<f64>,
    /// Weights after reweighting (and optional renormalization).
    pub modified: Array2<f64>,
}

pub fn sams_attention_forward(
    query: &Array2<f64>,
    key: &Array2<f64>,
    value: &Array2<f64>,
    softmask: &SoftMaskVector,
    options: SamsOptions,
) -> Result<SamsForward> {
    check_qkv(query, key, value)?;
    if key.nrows() != query.nrows() {
        return Err(Error::invalid("self-attention needs as many keys as queries"));
    }
    check_len(query.nrows(), softmask)?;
    let weights = attention_weights(query.view(), key.view());
    let modified = apply_sams_weights(&weights, softmask, options)?;
    let output = modified.dot(value);
    Ok(SamsForward {
        output,
        weights,
        modified,
    })
}

/// `A_hat V` with `A_hat` the reweighted `softmax(Q K^T / sqrt(d))`.
pub fn sams_attention(
    query: &Array2<f64>,
    key: &Array2<f64>,
    value: &Array2<f64>,
    softmask: &SoftMaskVector,
) -> Result<Array2<f64>> {
    Ok(sams_attention_forward(query, key, value, softmask, SamsOptions::default())?.output)
}

/// Reverse pass of [`sams_attention_forward`]; returns `(dQ, dK, dV)`.
pub fn sams_attention_backward(
    query: &Array2<f64>,
    key: &Array2<f64>,
    value: &Array2<f64>,
    softmask: &SoftMaskVector,
    options: SamsOptions,
    fwd: &SamsForward,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dv = fwd.modified.t().dot(d_out);
    let mut d_mod = d_out.dot(&value.t());
    if options.renormalize {
        // modified = raw / rowsum(raw); go back to d(raw).
        let raw_sums: Vec<f64> = fwd
            .weights
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, &a)| a * softmask.pair_weight(i, j))
                    .sum()
            })
            .collect();
        let dot = (&fwd.modified * &d_mod).sum_axis(Axis(1));
        for (i, mut row) in d_mod.rows_mut().into_iter().enumerate() {
            let s = raw_sums[i];
            if s > 0.0 {
                row.mapv_inplace(|g| (g - dot[i]) / s);
            }
        }
    }
    let mut d_weights = d_mod;
    for ((i, j), g) in d_weights.indexed_iter_mut() {
        *g *= softmask.pair_weight(i, j);
    }
    let ds = softmax_backward(&fwd.weights, &d_weights);
    let (dq, dk) = scores_backward(query, key, &ds);
    (dq, dk, dv)
}

/// Row sums of a weight matrix.
pub fn row_mass(weights: &Array2<f64>) -> Vec<f64> {
    let mut out = vec![0.0; weights.nrows()];
    Zip::from(&mut out)
        .and(weights.rows())
        .for_each(|o, r| *o = r.sum());
    out
}
