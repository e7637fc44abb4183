//! Seeded parameters.
//!
//! Drawn from a single ChaCha8 stream (see [`crate::seed`], label `"toy-params"`)
//! as standard normals in this order: input projection, time projection,
//! then per block `wq wk wv wo wq_c wk_c wv_c wo_c w1 w2`, then the output
//! projection. Each matrix is scaled by `gain / sqrt(fan_in)`; residual
//! output projections use gain 0.5, everything else gain 1. Biases start at 0.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::ToyConfig;
use crate::seed;

const RESIDUAL_GAIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub wq_cross: Array2<f64>,
    pub wk_cross: Array2<f64>,
    pub wv_cross: Array2<f64>,
    pub wo_cross: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_time: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub w_out: Array2<f64>,
}

fn draw(rng: &mut impl Rng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let scale = gain / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

impl ToyParams {
    pub fn generate(cfg: &ToyConfig, block_count: usize) -> Self {
        let mut rng = seed::stream(cfg.param_seed, "toy-params", 0);
        let (c, d, f, dt) = (cfg.channels, cfg.model_dim, cfg.mlp_dim, cfg.text_dim);
        let w_in = draw(&mut rng, 2 * c + 1, d, 1.0);
        let w_time = draw(&mut rng, d, d, 1.0);
        let blocks = (0..block_count)
            .map(|_| BlockParams {
                wq: draw(&mut rng, d, d, 1.0),
                wk: draw(&mut rng, d, d, 1.0),
                wv: draw(&mut rng, d, d, 1.0),
                wo: draw(&mut rng, d, d, RESIDUAL_GAIN),
                wq_cross: draw(&mut rng, d, d, 1.0),
                wk_cross: draw(&mut rng, dt, d, 1.0),
                wv_cross: draw(&mut rng, dt, d, 1.0),
                wo_cross: draw(&mut rng, d, d, RESIDUAL_GAIN),
                w1: draw(&mut rng, d, f, 1.0),
                b1: Array1::zeros(f),
                w2: draw(&mut rng, f, d, RESIDUAL_GAIN),
            })
            .collect();
        let w_out = draw(&mut rng, d, c, 1.0);
        Self {
            w_in,
            b_in: Array1::zeros(d),
            w_time,
            blocks,
            w_out,
        }
    }

    /// SHA-256 over every parameter's bit pattern, in generation order.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut feed = |values: &mut dyn Iterator<Item = &f64>| {
            for v in values {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        feed(&mut self.w_in.iter());
        feed(&mut self.b_in.iter());
        feed(&mut self.w_time.iter());
        for b in &self.blocks {
            for m in [
                &b.wq, &b.wk, &b.wv, &b.wo, &b.wq_cross, &b.wk_cross, &b.wv_cross, &b.wo_cross, &b.w1,
                &b.w2,
            ] {
                feed(&mut m.iter());
            }
            feed(&mut b.b1.iter());
        }
        feed(&mut self.w_out.iter());
        h.finalize().into()
    }
}
