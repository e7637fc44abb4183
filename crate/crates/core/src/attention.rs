//! Dense single-head attention and its reverse-mode derivatives.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// In-place numerically stable softmax over each row.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

/// `Q K^T / sqrt(d)`.
pub fn scaled_scores(query: ArrayView2<f64>, key: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (query.ncols() as f64).sqrt();
    let mut s = query.dot(&key.t());
    s.mapv_inplace(|v| v * scale);
    s
}

/// `softmax(Q K^T / sqrt(d))`.
pub fn attention_weights(query: ArrayView2<f64>, key: ArrayView2<f64>) -> Array2<f64> {
    let mut s = scaled_scores(query, key);
    softmax_rows(&mut s);
    s
}

/// Shape checks shared by every self-attention variant.
pub fn check_qkv(query: &Array2<f64>, key: &Array2<f64>, value: &Array2<f64>) -> Result<()> {
    if query.nrows() == 0 || query.ncols() == 0 {
        return Err(Error::invalid("attention needs HW >= 1 and d >= 1"));
    }
    if key.ncols() != query.ncols() {
        return Err(Error::invalid(format!(
            "query dim {} does not match key dim {}",
            query.ncols(),
            key.ncols()
        )));
    }
    if key.nrows() != value.nrows() {
        return Err(Error::invalid(format!(
            "{} keys but {} values",
            key.nrows(),
            value.nrows()
        )));
    }
    if value.ncols() == 0 {
        return Err(Error::invalid("value dim must be >= 1"));
    }
    Ok(())
}

/// Plain attention output and the weights that produced it.
pub fn attention(
    query: &Array2<f64>,
    key: &Array2<f64>,
    value: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_qkv(query, key, value)?;
    let weights = attention_weights(query.view(), key.view());
    let out = weights.dot(value);
    Ok((out, weights))
}

/// Given `A = softmax(S)` row-wise and `dL/dA`, returns `dL/dS`.
pub fn softmax_backward(weights: &Array2<f64>, d_weights: &Array2<f64>) -> Array2<f64> {
    let dot = (weights * d_weights).sum_axis(Axis(1));
    let mut ds = d_weights.clone();
    Zip::from(ds.rows_mut())
        .and(weights.rows())
        .and(&dot)
        .for_each(|mut ds_row, a_row, &dot| {
            Zip::from(&mut ds_row).and(&a_row).for_each(|d, &a| {
                *d = a * (*d - dot);
            });
        });
    ds
}

/// Gradients of `S = Q K^T / sqrt(d)` with respect to `Q` and `K`.
pub fn scores_backward(
    query: &Array2<f64>,
    key: &Array2<f64>,
    d_scores: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (query.ncols() as f64).sqrt();
    let mut dq = d_scores.dot(key);
    dq.mapv_inplace(|v| v * scale);
    let mut dk = d_scores.t().dot(query);
    dk.mapv_inplace(|v| v * scale);
    (dq, dk)
}

/// Reverse pass of `out = A V` with `A = softmax(Q K^T / sqrt(d))`.
pub fn attention_backward(
    query: &Array2<f64>,
    key: &Array2<f64>,
    value: &Array2<f64>,
    weights: &Array2<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d_weights = d_out.dot(&value.t());
    let dv = weights.t().dot(d_out);
    let ds = softmax_backward(weights, &d_weights);
    let (dq, dk) = scores_backward(query, key, &ds);
    (dq, dk, dv)
}
