use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};

use super::arch::{Op, ToyArchitecture};
use super::params::{BlockParams, ToyParams};
use super::ToyConfig;
use crate::attention::{attention_backward, scaled_scores, scores_backward, softmax_backward, softmax_rows};
use crate::error::{Error, Result};
use crate::hooks::{BlockInfo, HookSet, InterceptedAttention, InterceptorKind, LayerFilter, PlainInterceptor, SelfAttentionInterceptor};
use crate::latent::Latent;
use crate::steer::{CrossAttentionDenoiser, CrossAttentionMap};

/// Inpainting condition channels: the mask and the masked-image latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// One channel, 1 at masked positions.
    pub mask: Latent,
    pub masked_image: Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapturedSelf {
    pub layer: usize,
    pub resolution: (usize, usize),
    pub timestep: usize,
    /// Row-stochastic weights before any interceptor modification.
    pub weights: Array2<f64>,
    pub modified: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub epsilon: Latent,
    pub self_maps: Vec<CapturedSelf>,
    pub cross_maps: Vec<CrossAttentionMap>,
    pub hook_log: Vec<(usize, InterceptorKind)>,
}

/// Row-wise RMS normalisation with its per-row scale.
#[derive(Debug, Clone)]
struct Normed {
    y: Array2<f64>,
    scale: Array1<f64>,
}

const NORM_EPS: f64 = 1e-6;

fn rms_norm(x: &Array2<f64>) -> Normed {
    let d = x.ncols() as f64;
    let scale = x.map_axis(Axis(1), |row| 1.0 / (row.dot(&row) / d + NORM_EPS).sqrt());
    let y = x * &scale.view().insert_axis(Axis(1));
    Normed { y, scale }
}

fn rms_norm_backward(n: &Normed, dy: &Array2<f64>) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let proj = (dy * &n.y).sum_axis(Axis(1)) / d;
    let mut dx = dy - &(&n.y * &proj.insert_axis(Axis(1)));
    dx *= &n.scale.view().insert_axis(Axis(1));
    dx
}

#[derive(Debug, Clone)]
struct BlockTape {
    norm_self: Normed,
    norm_cross: Normed,
    norm_mlp: Normed,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: InterceptedAttention,
    hook: Option<Arc<dyn SelfAttentionInterceptor>>,
    cross_weights: Array2<f64>,
    cross_keys: Array2<f64>,
    cross_values: Array2<f64>,
    cross_query: Array2<f64>,
    mlp: Array2<f64>,
}

/// Saved activations for one forward pass, enough to pull cross-attention
/// gradients back to the noisy latent.
#[derive(Debug, Clone)]
pub struct ToyTape {
    blocks: Vec<BlockTape>,
    grids: Vec<(usize, usize)>,
    /// Position in `blocks` of each returned cross map.
    cross_order: Vec<usize>,
    latent_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: ToyConfig,
    arch: ToyArchitecture,
    params: ToyParams,
}

fn time_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for k in 0..half {
        let freq = 10000f64.powf(-(k as f64) / half as f64);
        let arg = t as f64 * freq;
        e[k] = arg.sin();
        e[half + k] = arg.cos();
    }
    e
}

fn downsample(x: &Array2<f64>, (h, w): (usize, usize)) -> Array2<f64> {
    let (nh, nw) = (h / 2, w / 2);
    Array2::from_shape_fn((nh * nw, x.ncols()), |(r, c)| {
        let (i, j) = (r / nw, r % nw);
        x[[(2 * i) * w + 2 * j, c]]
    })
}

fn downsample_backward(d: &Array2<f64>, (h, w): (usize, usize)) -> Array2<f64> {
    let nw = w / 2;
    let mut out = Array2::zeros((h * w, d.ncols()));
    for (r, row) in d.rows().into_iter().enumerate() {
        let (i, j) = (r / nw, r % nw);
        out.row_mut(2 * i * w + 2 * j).assign(&row);
    }
    out
}

fn upsample(x: &Array2<f64>, (h, w): (usize, usize)) -> Array2<f64> {
    let nw = 2 * w;
    Array2::from_shape_fn((4 * h * w, x.ncols()), |(r, c)| {
        let (i, j) = (r / nw, r % nw);
        x[[(i / 2) * w + j / 2, c]]
    })
}

fn upsample_backward(d: &Array2<f64>, (h, w): (usize, usize)) -> Array2<f64> {
    let nw = 2 * w;
    let mut out = Array2::zeros((h * w, d.ncols()));
    for (r, row) in d.rows().into_iter().enumerate() {
        let (i, j) = (r / nw, r % nw);
        let mut dst = out.row_mut((i / 2) * w + j / 2);
        dst += &row;
    }
    out
}

impl ToyDenoiser {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = ToyArchitecture::new(cfg.height, cfg.width);
        let params = ToyParams::generate(&cfg, arch.blocks.len());
        Ok(Self { cfg, arch, params })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.arch.blocks
    }

    pub fn architecture(&self) -> &ToyArchitecture {
        &self.arch
    }

    pub fn parameter_checksum(&self) -> [u8; 32] {
        self.params.checksum()
    }

    fn check_inputs(&self, latent: &Latent, cond: &Conditioning, text: &Array2<f64>) -> Result<()> {
        let (c, h, w) = (self.cfg.channels, self.cfg.height, self.cfg.width);
        if latent.shape() != (c, h, w) {
            return Err(Error::invalid(format!(
                "latent shape {:?} does not match the toy's {:?}",
                latent.shape(),
                (c, h, w)
            )));
        }
        if cond.mask.shape() != (1, h, w) || cond.masked_image.shape() != (c, h, w) {
            return Err(Error::invalid("condition latents do not match the toy's latent shape"));
        }
        if text.ncols() != self.cfg.text_dim || text.nrows() == 0 {
            return Err(Error::invalid(format!(
                "text embedding must be L x {}, got {:?}",
                self.cfg.text_dim,
                text.dim()
            )));
        }
        Ok(())
    }

    fn embed(&self, latent: &Latent, timestep: usize, cond: &Conditioning) -> Array2<f64> {
        let c = self.cfg.channels;
        let mut input = Array2::zeros((self.cfg.height * self.cfg.width, 2 * c + 1));
        input.slice_mut(s![.., ..c]).assign(&latent.to_patches());
        input.slice_mut(s![.., c..c + 1]).assign(&cond.mask.to_patches());
        input.slice_mut(s![.., c + 1..]).assign(&cond.masked_image.to_patches());
        let time = time_embedding(timestep, self.cfg.model_dim).dot(&self.params.w_time);
        let mut x = input.dot(&self.params.w_in);
        x += &self.params.b_in;
        x += &time;
        x
    }

    /// One transformer block on patch features `x` (`HW x D`) at the block's grid.
    ///
    /// `hook` replaces the self-attention computation when given.
    pub fn block_forward(
        &self,
        layer: usize,
        x: &Array2<f64>,
        text: &Array2<f64>,
        hook: Option<&dyn SelfAttentionInterceptor>,
    ) -> Result<Array2<f64>> {
        let pos = layer
            .checked_sub(1)
            .filter(|p| *p < self.arch.blocks.len())
            .ok_or_else(|| Error::invalid(format!("no self-attention block {layer}")))?;
        let info = self.arch.blocks[pos];
        let (h, w) = info.resolution;
        if x.dim() != (h * w, self.cfg.model_dim) {
            return Err(Error::invalid(format!(
                "block {layer} expects {}x{} features, got {:?}",
                h * w,
                self.cfg.model_dim,
                x.dim()
            )));
        }
        let hook = hook.unwrap_or(&PlainInterceptor);
        Ok(self.run_block(pos, x, text, hook, false)?.0)
    }

    fn run_block(
        &self,
        pos: usize,
        x: &Array2<f64>,
        text: &Array2<f64>,
        hook: &dyn SelfAttentionInterceptor,
        keep_maps: bool,
    ) -> Result<(Array2<f64>, BlockTape)> {
        let p: &BlockParams = &self.params.blocks[pos];
        let info = &self.arch.blocks[pos];
        let norm_self = rms_norm(x);
        let q = norm_self.y.dot(&p.wq);
        let k = norm_self.y.dot(&p.wk);
        let v = norm_self.y.dot(&p.wv);
        let attn = hook.forward(&q, &k, &v, info, keep_maps)?;
        let x1 = x + &attn.output.dot(&p.wo);

        let norm_cross = rms_norm(&x1);
        let cq = norm_cross.y.dot(&p.wq_cross);
        let ck = text.dot(&p.wk_cross);
        let cv = text.dot(&p.wv_cross);
        let mut ca = scaled_scores(cq.view(), ck.view());
        softmax_rows(&mut ca);
        let x2 = &x1 + &ca.dot(&cv).dot(&p.wo_cross);

        let norm_mlp = rms_norm(&x2);
        let mut pre = norm_mlp.y.dot(&p.w1);
        pre += &p.b1;
        let g = pre.mapv(f64::tanh);
        let x3 = &x2 + &g.dot(&p.w2);
        let tape = BlockTape {
            norm_self,
            norm_cross,
            norm_mlp,
            q,
            k,
            v,
            attn,
            hook: None,
            cross_weights: ca,
            cross_keys: ck,
            cross_values: cv,
            cross_query: cq,
            mlp: g,
        };
        Ok((x3, tape))
    }

    /// Predicts the noise in `latent` at training timestep `timestep`.
    ///
    /// Interceptors in `hooks` replace self-attention at their blocks; maps are
    /// returned for the layers selected by the hook set's capture filters.
    pub fn forward(
        &self,
        latent: &Latent,
        timestep: usize,
        cond: &Conditioning,
        text: &Array2<f64>,
        hooks: &HookSet,
    ) -> Result<DenoiseOutput> {
        Ok(self.forward_impl(latent, timestep, cond, text, hooks, false)?.0)
    }

    /// Forward pass that keeps a tape for [`ToyDenoiser::backward_cross`].
    /// Every block's cross-attention map is returned.
    pub fn forward_with_tape(
        &self,
        latent: &Latent,
        timestep: usize,
        cond: &Conditioning,
        text: &Array2<f64>,
        hooks: &HookSet,
    ) -> Result<(DenoiseOutput, ToyTape)> {
        let mut hooks = hooks.clone();
        hooks.capture_cross = LayerFilter::All;
        let (out, tape) = self.forward_impl(latent, timestep, cond, text, &hooks, true)?;
        Ok((out, tape.expect("tape requested")))
    }

    fn forward_impl(
        &self,
        latent: &Latent,
        timestep: usize,
        cond: &Conditioning,
        text: &Array2<f64>,
        hooks: &HookSet,
        keep_tape: bool,
    ) -> Result<(DenoiseOutput, Option<ToyTape>)> {
        hooks.validate(&self.arch.blocks)?;
        self.check_inputs(latent, cond, text)?;
        let mut x = self.embed(latent, timestep, cond);
        let mut grid = (self.cfg.height, self.cfg.width);
        let mut skips: Vec<Option<Array2<f64>>> = vec![None; 3];
        let mut self_maps = Vec::new();
        let mut cross_maps = Vec::new();
        let mut tapes = Vec::new();
        let mut grids = Vec::new();
        let mut cross_order = Vec::new();
        let plain: Arc<dyn SelfAttentionInterceptor> = Arc::new(PlainInterceptor);
        for op in &self.arch.program {
            grids.push(grid);
            match *op {
                Op::Block(pos) => {
                    let info = self.arch.blocks[pos];
                    let hook = hooks.get(info.index).cloned();
                    let active = hook.clone().unwrap_or_else(|| plain.clone());
                    let want_self = hooks.capture_self.contains(info.index);
                    let want_cross = hooks.capture_cross.contains(info.index);
                    let (next, mut tape) = self.run_block(pos, &x, text, active.as_ref(), keep_tape || want_self)?;
                    if want_self {
                        self_maps.push(CapturedSelf {
                            layer: info.index,
                            resolution: info.resolution,
                            timestep,
                            weights: tape.attn.weights.clone().expect("maps requested"),
                            modified: tape.attn.modified.clone(),
                        });
                    }
                    if want_cross {
                        cross_order.push(tapes.len());
                        cross_maps.push(CrossAttentionMap {
                            weights: tape.cross_weights.clone(),
                            resolution: info.resolution,
                            token_count: text.nrows(),
                            layer_index: info.index,
                        });
                    }
                    if keep_tape {
                        tape.hook = hook;
                        tapes.push(tape);
                    }
                    x = next;
                }
                Op::Down => {
                    x = downsample(&x, grid);
                    grid = (grid.0 / 2, grid.1 / 2);
                }
                Op::Up => {
                    x = upsample(&x, grid);
                    grid = (grid.0 * 2, grid.1 * 2);
                }
                Op::SaveSkip(i) => skips[i] = Some(x.clone()),
                Op::AddSkip(i) => {
                    let skip = skips[i].as_ref().expect("program saves before adding");
                    x += skip;
                }
            }
        }
        let eps_patches = rms_norm(&x).y.dot(&self.params.w_out);
        let epsilon = Latent::from_patches(&eps_patches, self.cfg.height, self.cfg.width)?;
        if !epsilon.is_finite() {
            return Err(Error::NonFinite(format!("toy prediction at timestep {timestep}")));
        }
        let tape = keep_tape.then(|| ToyTape {
            blocks: tapes,
            grids,
            cross_order,
            latent_shape: latent.shape(),
        });
        Ok((
            DenoiseOutput {
                epsilon,
                self_maps,
                cross_maps,
                hook_log: hooks.log(),
            },
            tape,
        ))
    }

    /// Gradient with respect to the noisy latent of `sum_i <grads[i], cross_maps[i]>`.
    pub fn backward_cross(&self, tape: &ToyTape, grads: &[Array2<f64>]) -> Result<Latent> {
        if grads.len() != tape.cross_order.len() {
            return Err(Error::invalid(format!(
                "{} map gradients for {} captured maps",
                grads.len(),
                tape.cross_order.len()
            )));
        }
        let mut injected: Vec<Option<&Array2<f64>>> = vec![None; tape.blocks.len()];
        for (g, &pos) in grads.iter().zip(&tape.cross_order) {
            if g.dim() != tape.blocks[pos].cross_weights.dim() {
                return Err(Error::invalid("map gradient shape does not match its map"));
            }
            if g.iter().any(|v| *v != 0.0) {
                injected[pos] = Some(g);
            }
        }
        let (c, h, w) = tape.latent_shape;
        let d = self.cfg.model_dim;
        let mut dx: Option<Array2<f64>> = None;
        let mut dskips: Vec<Option<Array2<f64>>> = vec![None; 3];
        let mut block_cursor = tape.blocks.len();
        for (op, &grid) in self.arch.program.iter().zip(&tape.grids).rev() {
            match *op {
                Op::Block(pos) => {
                    block_cursor -= 1;
                    debug_assert_eq!(block_cursor, pos);
                    if dx.is_none() && injected[pos].is_none() {
                        continue;
                    }
                    let rows = grid.0 * grid.1;
                    let incoming = dx.take().unwrap_or_else(|| Array2::zeros((rows, d)));
                    dx = Some(self.block_backward(pos, &tape.blocks[pos], incoming, injected[pos])?);
                }
                Op::Down => {
                    let full = (grid.0, grid.1);
                    dx = dx.map(|g| downsample_backward(&g, full));
                }
                Op::Up => {
                    dx = dx.map(|g| upsample_backward(&g, grid));
                }
                Op::SaveSkip(i) => {
                    if let Some(ds) = dskips[i].take() {
                        dx = Some(match dx.take() {
                            Some(g) => g + ds,
                            None => ds,
                        });
                    }
                }
                Op::AddSkip(i) => dskips[i] = dx.clone(),
            }
        }
        let Some(dx0) = dx else {
            return Ok(Latent::zeros(c, h, w));
        };
        let d_input = dx0.dot(&self.params.w_in.t());
        let dz = d_input.slice(s![.., ..c]).to_owned();
        Latent::from_patches(&dz, h, w)
    }

    fn block_backward(
        &self,
        pos: usize,
        t: &BlockTape,
        d_out: Array2<f64>,
        inject: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let p = &self.params.blocks[pos];
        // MLP residual.
        let dg = d_out.dot(&p.w2.t());
        let dpre = dg * &t.mlp.mapv(|g| 1.0 - g * g);
        let dx2 = &d_out + &rms_norm_backward(&t.norm_mlp, &dpre.dot(&p.w1.t()));

        // Cross-attention residual.
        let d_cross_out = dx2.dot(&p.wo_cross.t());
        let mut d_cross_w = d_cross_out.dot(&t.cross_values.t());
        if let Some(g) = inject {
            d_cross_w += g;
        }
        let ds = softmax_backward(&t.cross_weights, &d_cross_w);
        let (dcq, _) = scores_backward(&t.cross_query, &t.cross_keys, &ds);
        let dx1 = &dx2 + &rms_norm_backward(&t.norm_cross, &dcq.dot(&p.wq_cross.t()));

        // Self-attention residual.
        let d_attn = dx1.dot(&p.wo.t());
        let (dq, dk, dv) = match &t.hook {
            Some(hook) => hook.backward(&t.q, &t.k, &t.v, &t.attn, &d_attn)?,
            None => {
                let weights = t.attn.weights.as_ref().expect("tape keeps weights");
                attention_backward(&t.q, &t.k, &t.v, weights, &d_attn)
            }
        };
        let d_norm = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
        Ok(dx1 + rms_norm_backward(&t.norm_self, &d_norm))
    }
}

/// The toy denoiser fixed at one timestep, condition and hook set, viewed as
/// a function of the noisy latent for steering.
#[derive(Debug, Clone, Copy)]
pub struct ToySteerPass<'a> {
    pub model: &'a ToyDenoiser,
    pub timestep: usize,
    pub cond: &'a Conditioning,
    pub text: &'a Array2<f64>,
    pub hooks: &'a HookSet,
}

impl CrossAttentionDenoiser for ToySteerPass<'_> {
    type Tape = ToyTape;

    fn forward_cross(&self, latent: &Latent) -> Result<(Vec<CrossAttentionMap>, ToyTape)> {
        let (out, tape) = self
            .model
            .forward_with_tape(latent, self.timestep, self.cond, self.text, self.hooks)?;
        Ok((out.cross_maps, tape))
    }

    fn backward_cross(&self, tape: &ToyTape, grads: &[Array2<f64>]) -> Result<Latent> {
        self.model.backward_cross(tape, grads)
    }
}
