//! Cross-attention steering.
//!
//! Prompt-token cross-attention is averaged per resolution, restricted to the
//! mask, and scored with a noisy-OR concentration loss
//! `L = -sum_tokens log(max(eps, 1 - prod_j (1 - a_j)))`. [`steer_update`]
//! descends that loss with respect to the noisy latent, differentiating through
//! the denoiser's cross-attention.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::mask::FlatMask;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionMap {
    /// `HW x L`, one row per patch.
    pub weights: Array2<f64>,
    pub resolution: (usize, usize),
    pub token_count: usize,
    pub layer_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenSelection {
    /// Every token the text encoder marks as a prompt word.
    AllPrompt,
    Indices(Vec<usize>),
}

impl TokenSelection {
    pub fn resolve(&self, prompt_tokens: &[usize]) -> Vec<usize> {
        match self {
            TokenSelection::AllPrompt => prompt_tokens.to_vec(),
            TokenSelection::Indices(ix) => ix.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteerConfig {
    /// Base step size; the applied step is `step_size * (1 - alpha_bar_t)`.
    pub step_size: f64,
    pub iterations_per_timestep: usize,
    pub epsilon_clamp: f64,
    pub tokens: TokenSelection,
    /// Longer side of the attention grids whose maps enter the loss.
    pub resolutions: Vec<usize>,
    /// Steer on every `stride`-th structure step.
    pub stride: usize,
    pub enabled: bool,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            step_size: 20.0,
            iterations_per_timestep: 1,
            epsilon_clamp: 1e-6,
            tokens: TokenSelection::AllPrompt,
            resolutions: vec![16, 32],
            stride: 1,
            enabled: true,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::invalid(format!(
                "steer step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.iterations_per_timestep == 0 {
            return Err(Error::invalid("steer iterations per timestep must be >= 1"));
        }
        if !(self.epsilon_clamp > 0.0 && self.epsilon_clamp <= 1e-2) {
            return Err(Error::invalid(format!(
                "steer epsilon clamp must lie in (0, 1e-2], got {}",
                self.epsilon_clamp
            )));
        }
        if self.stride == 0 {
            return Err(Error::invalid("steer stride must be >= 1"));
        }
        Ok(())
    }

    pub fn matches_resolution(&self, resolution: (usize, usize)) -> bool {
        self.resolutions.contains(&resolution.0.max(resolution.1))
    }
}

/// Averages maps per resolution. Output is ordered by resolution; each
/// averaged map carries the lowest contributing layer index.
pub fn collect_cross_attention(maps: &[CrossAttentionMap]) -> Result<Vec<CrossAttentionMap>> {
    if maps.is_empty() {
        return Err(Error::invalid("no cross-attention maps to average"));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<&CrossAttentionMap>> = BTreeMap::new();
    for m in maps {
        let (h, w) = m.resolution;
        if m.weights.dim() != (h * w, m.token_count) {
            return Err(Error::invalid(format!(
                "layer {} map has shape {:?}, expected ({}, {})",
                m.layer_index,
                m.weights.dim(),
                h * w,
                m.token_count
            )));
        }
        groups.entry(m.resolution).or_default().push(m);
    }
    groups
        .into_iter()
        .map(|(resolution, group)| {
            let tokens = group[0].token_count;
            if group.iter().any(|m| m.token_count != tokens) {
                return Err(Error::invalid(format!(
                    "maps at {resolution:?} disagree on token count"
                )));
            }
            let mut sum = Array2::<f64>::zeros(group[0].weights.dim());
            for m in &group {
                sum += &m.weights;
            }
            Ok(CrossAttentionMap {
                weights: sum / group.len() as f64,
                resolution,
                token_count: tokens,
                layer_index: group.iter().map(|m| m.layer_index).min().unwrap_or(0),
            })
        })
        .collect()
}

/// `avg[j][token] * mf[j]` for every patch `j`.
pub fn masked_token_attention(avg: &CrossAttentionMap, mf: &FlatMask, token: usize) -> Result<Vec<f64>> {
    if token >= avg.token_count {
        return Err(Error::invalid(format!(
            "token {token} out of range for {} tokens",
            avg.token_count
        )));
    }
    if mf.len() != avg.weights.nrows() {
        return Err(Error::invalid(format!(
            "mask has {} entries but map has {} patches",
            mf.len(),
            avg.weights.nrows()
        )));
    }
    Ok((0..mf.len())
        .map(|j| avg.weights[[j, token]] * mf.value(j))
        .collect())
}

/// Loss term of one token and its gradient with respect to each entry.
///
/// The gradient is zero when the clamp is active.
pub fn token_loss_and_grad(masked: &[f64], clamp: f64) -> (f64, Vec<f64>) {
    let n = masked.len();
    // prefix[j] = prod_{k<j}(1 - a_k), suffix[j] = prod_{k>=j}(1 - a_k).
    let mut prefix = vec![1.0; n + 1];
    for j in 0..n {
        prefix[j + 1] = prefix[j] * (1.0 - masked[j]);
    }
    let mut suffix = vec![1.0; n + 1];
    for j in (0..n).rev() {
        suffix[j] = suffix[j + 1] * (1.0 - masked[j]);
    }
    let covered = 1.0 - prefix[n];
    if covered < clamp {
        return (-clamp.ln(), vec![0.0; n]);
    }
    let loss = -covered.ln();
    let grad = (0..n)
        .map(|j| -(prefix[j] * suffix[j + 1]) / covered)
        .collect();
    (loss, grad)
}

/// Sums the per-token noisy-OR loss over every supplied masked attention vector.
pub fn steer_loss(masked_maps: &[Vec<f64>], clamp: f64) -> f64 {
    masked_maps
        .iter()
        .map(|m| token_loss_and_grad(m, clamp).0)
        .sum()
}

/// Loss of a set of raw per-block cross maps together with `dL/dmap` for each.
///
/// Maps whose resolution is not selected by `cfg` get a zero gradient.
pub fn loss_and_map_grads(
    maps: &[CrossAttentionMap],
    masks: &BTreeMap<(usize, usize), FlatMask>,
    tokens: &[usize],
    cfg: &SteerConfig,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let selected: Vec<CrossAttentionMap> = maps
        .iter()
        .filter(|m| cfg.matches_resolution(m.resolution))
        .cloned()
        .collect();
    let mut grads: Vec<Array2<f64>> = maps.iter().map(|m| Array2::zeros(m.weights.dim())).collect();
    if selected.is_empty() || tokens.is_empty() {
        return Ok((0.0, grads));
    }
    let averaged = collect_cross_attention(&selected)?;
    let mut total = 0.0;
    for avg in &averaged {
        let mf = masks.get(&avg.resolution).ok_or_else(|| {
            Error::invalid(format!("no mask supplied for resolution {:?}", avg.resolution))
        })?;
        let contributors: Vec<usize> = maps
            .iter()
            .enumerate()
            .filter(|(_, m)| m.resolution == avg.resolution)
            .map(|(i, _)| i)
            .collect();
        let share = 1.0 / contributors.len() as f64;
        for &token in tokens {
            let masked = masked_token_attention(avg, mf, token)?;
            let (loss, g) = token_loss_and_grad(&masked, cfg.epsilon_clamp);
            total += loss;
            for &i in &contributors {
                for (j, gj) in g.iter().enumerate() {
                    grads[i][[j, token]] += gj * mf.value(j) * share;
                }
            }
        }
    }
    Ok((total, grads))
}

/// A denoiser pass that exposes cross-attention maps and can pull gradients
/// on those maps back to the latent.
pub trait CrossAttentionDenoiser {
    type Tape;

    fn forward_cross(&self, latent: &Latent) -> Result<(Vec<CrossAttentionMap>, Self::Tape)>;

    /// `grads[i]` is `dL/dmaps[i]` for the maps returned by the same forward.
    fn backward_cross(&self, tape: &Self::Tape, grads: &[Array2<f64>]) -> Result<Latent>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteerRecord {
    /// Loss before the first update and after each update.
    pub losses: Vec<f64>,
    pub aborted: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SteerOutcome {
    pub latent: Latent,
    pub record: SteerRecord,
}

/// Evaluates the loss and its latent gradient in one forward/backward pair.
pub fn loss_and_latent_grad<D: CrossAttentionDenoiser>(
    denoiser: &D,
    latent: &Latent,
    masks: &BTreeMap<(usize, usize), FlatMask>,
    tokens: &[usize],
    cfg: &SteerConfig,
) -> Result<(f64, Latent)> {
    let (maps, tape) = denoiser.forward_cross(latent)?;
    let (loss, grads) = loss_and_map_grads(&maps, masks, tokens, cfg)?;
    let grad = denoiser.backward_cross(&tape, &grads)?;
    Ok((loss, grad))
}

pub fn evaluate_loss<D: CrossAttentionDenoiser>(
    denoiser: &D,
    latent: &Latent,
    masks: &BTreeMap<(usize, usize), FlatMask>,
    tokens: &[usize],
    cfg: &SteerConfig,
) -> Result<f64> {
    let (maps, _) = denoiser.forward_cross(latent)?;
    Ok(loss_and_map_grads(&maps, masks, tokens, cfg)?.0)
}

/// Runs `cfg.iterations_per_timestep` plain gradient steps
/// `latent -= step * grad` with `step = cfg.step_size * noise_scale`.
///
/// A non-finite loss or gradient aborts the remaining updates and returns the
/// latent as it was on entry.
pub fn steer_update<D: CrossAttentionDenoiser>(
    latent: &Latent,
    denoiser: &D,
    masks: &BTreeMap<(usize, usize), FlatMask>,
    tokens: &[usize],
    cfg: &SteerConfig,
    noise_scale: f64,
) -> Result<SteerOutcome> {
    cfg.validate()?;
    let step = cfg.step_size * noise_scale;
    let mut current = latent.clone();
    let mut losses = Vec::with_capacity(cfg.iterations_per_timestep + 1);
    let abort = |losses: Vec<f64>, why: String| SteerOutcome {
        latent: latent.clone(),
        record: SteerRecord {
            losses,
            aborted: true,
            diagnostic: Some(why),
        },
    };
    for _ in 0..cfg.iterations_per_timestep {
        let (loss, grad) = loss_and_latent_grad(denoiser, &current, masks, tokens, cfg)?;
        losses.push(loss);
        if !loss.is_finite() {
            return Ok(abort(losses, format!("non-finite steer loss {loss}")));
        }
        if !grad.is_finite() {
            return Ok(abort(losses, "non-finite steer gradient".into()));
        }
        if loss == 0.0 {
            break;
        }
        current.data.scaled_add(-step, &grad.data);
    }
    if losses.last() != Some(&0.0) {
        let after = evaluate_loss(denoiser, &current, masks, tokens, cfg)?;
        losses.push(after);
        if !after.is_finite() {
            return Ok(abort(losses, format!("non-finite steer loss {after}")));
        }
    }
    Ok(SteerOutcome {
        latent: current,
        record: SteerRecord {
            losses,
            aborted: false,
            diagnostic: None,
        },
    })
}
