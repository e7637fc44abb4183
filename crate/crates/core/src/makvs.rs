//! Mask-adjusted key/value style injection.
//!
//! Masked rows of the keys and values are replaced by the mean over unmasked
//! rows (`K~`, `V~`). Queries then attend over the concatenation of the
//! original keys and `lambda * K~`, mixing `[V; V~]`. The softmax spans all
//! `2HW` columns. Values are never scaled by `lambda`.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::attention::{attention_weights, check_qkv};
use crate::error::{Error, Result};
use crate::mask::FlatMask;

/// Keys and values of one self-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub resolution: (usize, usize),
    pub layer_index: usize,
}

impl KvPair {
    pub fn new(key: Array2<f64>, value: Array2<f64>, resolution: (usize, usize), layer_index: usize) -> Result<Self> {
        if key.nrows() != value.nrows() {
            return Err(Error::invalid(format!(
                "key has {} rows but value has {}",
                key.nrows(),
                value.nrows()
            )));
        }
        if key.nrows() != resolution.0 * resolution.1 {
            return Err(Error::invalid("key rows do not match the block resolution"));
        }
        Ok(Self {
            key,
            value,
            resolution,
            layer_index,
        })
    }
}

/// Style strength `lambda`; must be finite and nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleStrength(f64);

impl StyleStrength {
    pub const STYLIZED: f64 = 1.4;
    pub const NATURAL: f64 = 0.8;

    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self(lambda))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for StyleStrength {
    fn default() -> Self {
        Self(Self::STYLIZED)
    }
}

fn unmasked_mean(features: &Array2<f64>, mf: &FlatMask) -> Result<Array1<f64>> {
    let count = mf.unmasked_count();
    if count == 0 {
        let (height, width) = mf.resolution();
        return Err(Error::UnrepresentableStyle { height, width });
    }
    let mut sum = Array1::<f64>::zeros(features.ncols());
    for (i, row) in features.rows().into_iter().enumerate() {
        if !mf.is_masked(i) {
            sum += &row;
        }
    }
    Ok(sum / count as f64)
}

/// Replaces masked rows with the mean of the unmasked rows.
pub fn style_replace(features: &Array2<f64>, mf: &FlatMask) -> Result<Array2<f64>> {
    if features.nrows() != mf.len() {
        return Err(Error::invalid(format!(
            "{} feature rows but mask has {} entries",
            features.nrows(),
            mf.len()
        )));
    }
    let mean = unmasked_mean(features, mf)?;
    let mut out = features.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        if mf.is_masked(i) {
            row.assign(&mean);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MakvsForward {
    pub output: Array2<f64>,
    /// Attention over the concatenated `2HW` keys.
    pub weights: Array2<f64>,
}

fn check_inputs(query: &Array2<f64>, kv: &KvPair, mf: &FlatMask) -> Result<()> {
    check_qkv(query, &kv.key, &kv.value)?;
    if query.nrows() != kv.key.nrows() || mf.len() != kv.key.nrows() {
        return Err(Error::invalid(format!(
            "query rows {}, key rows {} and mask length {} must agree",
            query.nrows(),
            kv.key.nrows(),
            mf.len()
        )));
    }
    Ok(())
}

pub fn makvs_attention_forward(
    query: &Array2<f64>,
    kv: &KvPair,
    mf: &FlatMask,
    strength: StyleStrength,
) -> Result<MakvsForward> {
    check_inputs(query, kv, mf)?;
    let mut style_key = style_replace(&kv.key, mf)?;
    let style_value = style_replace(&kv.value, mf)?;
    style_key.mapv_inplace(|v| v * strength.get());
    let keys = concatenate(Axis(0), &[kv.key.view(), style_key.view()])
        .expect("key blocks share a column count");
    let values = concatenate(Axis(0), &[kv.value.view(), style_value.view()])
        .expect("value blocks share a column count");
    let weights = attention_weights(query.view(), keys.view());
    let output = weights.dot(&values);
    Ok(MakvsForward { output, weights })
}

/// Concatenated-key attention with style-replaced keys scaled by `lambda`.
pub fn makvs_attention(
    query: &Array2<f64>,
    kv: &KvPair,
    mf: &FlatMask,
    strength: StyleStrength,
) -> Result<Array2<f64>> {
    Ok(makvs_attention_forward(query, kv, mf, strength)?.output)
}

pub fn makvs_attention_naive_forward(
    query: &Array2<f64>,
    kv: &KvPair,
    mf: &FlatMask,
) -> Result<MakvsForward> {
    check_inputs(query, kv, mf)?;
    let style_key = style_replace(&kv.key, mf)?;
    let style_value = style_replace(&kv.value, mf)?;
    let weights = attention_weights(query.view(), style_key.view());
    let output = weights.dot(&style_value);
    Ok(MakvsForward { output, weights })
}

/// Comparison variant: attend over the style-replaced keys only.
pub fn makvs_attention_naive(query: &Array2<f64>, kv: &KvPair, mf: &FlatMask) -> Result<Array2<f64>> {
    Ok(makvs_attention_naive_forward(query, kv, mf)?.output)
}

/// Per-row attention mass placed on the style half of a concatenated weight matrix.
pub fn style_block_mass(weights: &Array2<f64>) -> Vec<f64> {
    let n = weights.ncols() / 2;
    weights
        .slice(s![.., n..])
        .rows()
        .into_iter()
        .map(|r| r.sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn kv(key: Array2<f64>, value: Array2<f64>) -> KvPair {
        let n = key.nrows();
        KvPair::new(key, value, (1, n), 9).unwrap()
    }

    #[test]
    fn style_replace_examples() {
        let k = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(style_replace(&k, &FlatMask::from_bits(&[1, 0])).unwrap(), arr2(&[[3.0, 4.0], [3.0, 4.0]]));
        let k = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(
            style_replace(&k, &FlatMask::from_bits(&[1, 0, 0])).unwrap(),
            arr2(&[[4.0, 5.0], [3.0, 4.0], [5.0, 6.0]])
        );
        assert_eq!(style_replace(&k, &FlatMask::from_bits(&[0, 0, 0])).unwrap(), k);
    }

    #[test]
    fn all_masked_is_unrepresentable() {
        let k = arr2(&[[1.0], [2.0]]);
        let err = style_replace(&k, &FlatMask::from_bits(&[1, 1])).unwrap_err();
        assert!(matches!(err, Error::UnrepresentableStyle { .. }));
        let q = arr2(&[[0.1], [0.2]]);
        let err = makvs_attention(&q, &kv(k.clone(), k.clone()), &FlatMask::from_bits(&[1, 1]), StyleStrength::default());
        assert!(matches!(err, Err(Error::UnrepresentableStyle { .. })));
        let err = makvs_attention_naive(&q, &kv(k.clone(), k), &FlatMask::from_bits(&[1, 1]));
        assert!(matches!(err, Err(Error::UnrepresentableStyle { .. })));
    }

    #[test]
    fn strength_validation() {
        assert!(StyleStrength::new(-0.1).is_err());
        assert!(StyleStrength::new(f64::INFINITY).is_err());
        assert_eq!(StyleStrength::default().get(), 1.4);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = random(&mut rng, 3, 2);
        let pair = kv(random(&mut rng, 3, 2), random(&mut rng, 3, 2));
        assert!(makvs_attention(&q, &pair, &FlatMask::from_bits(&[1, 0]), StyleStrength::default()).is_err());
        let q_bad = random(&mut rng, 3, 4);
        assert!(makvs_attention(&q_bad, &pair, &FlatMask::from_bits(&[1, 0, 0]), StyleStrength::default()).is_err());
    }

    #[test]
    fn empty_mask_unit_strength_reproduces_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (random(&mut rng, 6, 4), random(&mut rng, 6, 4), random(&mut rng, 6, 3));
        let plain = attention(&q, &k, &v).unwrap().0;
        let got = makvs_attention(&q, &kv(k.clone(), v.clone()), &FlatMask::from_bits(&[0; 6]), StyleStrength::new(1.0).unwrap()).unwrap();
        assert!((&got - &plain).iter().all(|d| d.abs() <= 1e-12));
        let naive = makvs_attention_naive(&q, &kv(k, v), &FlatMask::from_bits(&[0; 6])).unwrap();
        assert!((&naive - &plain).iter().all(|d| d.abs() <= 1e-12));
    }

    #[test]
    fn naive_with_one_unmasked_patch_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (random(&mut rng, 2, 3), random(&mut rng, 2, 3), random(&mut rng, 2, 3));
        let f = makvs_attention_naive_forward(&q, &kv(k, v), &FlatMask::from_bits(&[1, 0])).unwrap();
        for w in f.weights.iter() {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn concatenated_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (random(&mut rng, 9, 4), random(&mut rng, 9, 4), random(&mut rng, 9, 4));
        let mf = FlatMask::from_bits(&[1, 1, 0, 0, 1, 0, 0, 0, 1]);
        let f = makvs_attention_forward(&q, &kv(k, v), &mf, StyleStrength::default()).unwrap();
        assert_eq!(f.weights.dim(), (9, 18));
        for row in f.weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn style_replace_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = random(&mut rng, 7, 3);
        let mf = FlatMask::from_bits(&[0, 1, 1, 0, 0, 1, 0]);
        let once = style_replace(&k, &mf).unwrap();
        let twice = style_replace(&once, &mf).unwrap();
        assert!((&once - &twice).iter().all(|d| d.abs() <= 1e-15));
    }

    #[test]
    fn larger_lambda_moves_mass_to_style_block() {
        // Positive queries and keys make every style logit positive.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = Array2::from_shape_fn((5, 3), |_| rng.random_range(0.1..1.0));
        let k = Array2::from_shape_fn((5, 3), |_| rng.random_range(0.1..1.0));
        let v = random(&mut rng, 5, 2);
        let pair = kv(k, v);
        let mf = FlatMask::from_bits(&[1, 1, 0, 0, 0]);
        let mut prev: Option<Vec<f64>> = None;
        for lambda in [0.0, 0.5, 1.0, 1.4, 2.0, 4.0] {
            let f = makvs_attention_forward(&q, &pair, &mf, StyleStrength::new(lambda).unwrap()).unwrap();
            let mass = style_block_mass(&f.weights);
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(&mass) {
                    assert!(b > a, "lambda {lambda}: {b} <= {a}");
                }
            }
            prev = Some(mass);
        }
    }
}
