use std::collections::BTreeMap;

use image::RgbImage;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::hooks::{BlockInfo, HookSet};
use crate::latent::Latent;
use crate::mask::{BinaryMask, FlatMask};
use crate::seed;
use crate::steer::{steer_update, SteerConfig, SteerOutcome};
use crate::toy::{
    self, Conditioning, DenoiseOutput, NoiseSchedule, ToyConfig, ToyDenoiser, ToySteerPass, ToyTextEmbedding,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    /// `L x d_text`.
    pub embeddings: Array2<f64>,
    /// Indices of the prompt-word tokens.
    pub prompt_tokens: Vec<usize>,
}

/// What the pipeline needs from a latent-diffusion inpainting model.
///
/// Self-attention blocks are numbered from 1 in forward order and the
/// numbering must not change during a run. Interceptors and map capture are
/// requested per call through a [`HookSet`].
pub trait BackendAdapter {
    fn name(&self) -> &str;

    fn blocks(&self) -> &[BlockInfo];

    /// `(channels, height, width)` of the latent.
    fn latent_shape(&self) -> (usize, usize, usize);

    fn encode_text(&self, prompt: &str) -> Result<TextEncoding>;

    fn encode_image(&self, image: &RgbImage) -> Result<Latent>;

    /// The mask at latent resolution and the model's condition latents.
    fn condition(&self, image: &RgbImage, mask: &BinaryMask) -> Result<(BinaryMask, Conditioning)>;

    /// Training timesteps visited by an `steps`-step sampler, noisiest first.
    fn timesteps(&self, steps: usize) -> Result<Vec<usize>>;

    /// Cumulative signal fraction at `t`; `None` is the clean endpoint.
    fn alpha_bar(&self, t: Option<usize>) -> f64;

    fn initial_latent(&self, seed: u64) -> Latent;

    /// Forward-noises `z0` to timestep `t` with noise keyed by `(seed, t)`.
    fn noise_latent(&self, z0: &Latent, t: Option<usize>, seed: u64) -> Latent;

    fn predict_noise(
        &self,
        latent: &Latent,
        t: usize,
        text: &TextEncoding,
        cond: &Conditioning,
        hooks: &HookSet,
    ) -> Result<DenoiseOutput>;

    /// One steering update at timestep `t`, with `hooks` active during the
    /// extraction passes.
    #[allow(clippy::too_many_arguments)]
    fn steer(
        &self,
        latent: &Latent,
        t: usize,
        text: &TextEncoding,
        cond: &Conditioning,
        hooks: &HookSet,
        masks: &BTreeMap<(usize, usize), FlatMask>,
        tokens: &[usize],
        cfg: &SteerConfig,
    ) -> Result<SteerOutcome>;

    fn sampler_step(&self, latent: &Latent, eps: &Latent, t: usize, t_prev: Option<usize>) -> Latent;

    fn decode(&self, latent: &Latent) -> Result<RgbImage>;

    /// Hex digest identifying the model weights, when the backend has one.
    fn parameter_checksum(&self) -> Option<String>;
}

/// The toy denoiser behind the adapter interface.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    model: ToyDenoiser,
    schedule: NoiseSchedule,
    text_seed: u64,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ToyBackend {
    /// A toy model sized for images of `height x width` pixels. Parameters and
    /// token embeddings are derived from `seed`.
    pub fn for_image(height: usize, width: usize, seed: u64) -> Result<Self> {
        let d = toy::DOWNSCALE;
        if !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "toy backend needs image sides divisible by {d}, got {width}x{height}"
            )));
        }
        let cfg = ToyConfig {
            param_seed: seed,
            ..ToyConfig::default().with_latent(height / d, width / d)
        };
        Self::new(cfg, seed)
    }

    pub fn new(cfg: ToyConfig, text_seed: u64) -> Result<Self> {
        Ok(Self {
            model: ToyDenoiser::new(cfg)?,
            schedule: NoiseSchedule::default(),
            text_seed,
        })
    }

    pub fn model(&self) -> &ToyDenoiser {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl BackendAdapter for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn blocks(&self) -> &[BlockInfo] {
        self.model.blocks()
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        let c = self.model.config();
        (c.channels, c.height, c.width)
    }

    fn encode_text(&self, prompt: &str) -> Result<TextEncoding> {
        let c = self.model.config();
        let e = ToyTextEmbedding::encode(prompt, self.text_seed, c.tokens, c.text_dim);
        Ok(TextEncoding {
            embeddings: e.tokens,
            prompt_tokens: e.prompt_tokens,
        })
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Latent> {
        let lat = toy::encode_image(image, self.model.config().channels)?;
        let (_, h, w) = self.latent_shape();
        if (lat.height(), lat.width()) != (h, w) {
            return Err(Error::invalid("image size does not match the toy backend"));
        }
        Ok(lat)
    }

    fn condition(&self, image: &RgbImage, mask: &BinaryMask) -> Result<(BinaryMask, Conditioning)> {
        let (c, h, w) = self.latent_shape();
        let masked_image = toy::masked_image_latent(image, mask, c)?;
        let (small, mask_lat) = toy::mask_latent(mask, h, w)?;
        Ok((
            small,
            Conditioning {
                mask: mask_lat,
                masked_image,
            },
        ))
    }

    fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        self.schedule.sampler_timesteps(steps)
    }

    fn alpha_bar(&self, t: Option<usize>) -> f64 {
        self.schedule.alpha_bar(t)
    }

    fn initial_latent(&self, seed: u64) -> Latent {
        use rand::Rng;
        let mut rng = seed::stream(seed, "initial-latent", 0);
        let (c, h, w) = self.latent_shape();
        let mut z = Latent::zeros(c, h, w);
        z.data.mapv_inplace(|_| rng.sample(rand_distr::StandardNormal));
        z
    }

    fn noise_latent(&self, z0: &Latent, t: Option<usize>, seed: u64) -> Latent {
        self.schedule.noise_latent(z0, t, seed)
    }

    fn predict_noise(
        &self,
        latent: &Latent,
        t: usize,
        text: &TextEncoding,
        cond: &Conditioning,
        hooks: &HookSet,
    ) -> Result<DenoiseOutput> {
        self.model.forward(latent, t, cond, &text.embeddings, hooks)
    }

    fn steer(
        &self,
        latent: &Latent,
        t: usize,
        text: &TextEncoding,
        cond: &Conditioning,
        hooks: &HookSet,
        masks: &BTreeMap<(usize, usize), FlatMask>,
        tokens: &[usize],
        cfg: &SteerConfig,
    ) -> Result<SteerOutcome> {
        let pass = ToySteerPass {
            model: &self.model,
            timestep: t,
            cond,
            text: &text.embeddings,
            hooks,
        };
        steer_update(latent, &pass, masks, tokens, cfg, 1.0 - self.alpha_bar(Some(t)))
    }

    fn sampler_step(&self, latent: &Latent, eps: &Latent, t: usize, t_prev: Option<usize>) -> Latent {
        self.schedule.ddim_step(latent, eps, t, t_prev)
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        Ok(toy::decode_latent(latent))
    }

    fn parameter_checksum(&self) -> Option<String> {
        Some(hex(&self.model.parameter_checksum()))
    }
}
