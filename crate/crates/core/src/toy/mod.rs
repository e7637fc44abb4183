//! A deterministic miniature attention denoiser for desk-scale verification.
//!
//! The network mirrors the attention layout of a latent-diffusion U-Net
//! without convolutions: per-patch linear maps, nearest-neighbour down- and
//! upsampling, and pre-normalised transformer blocks (self-attention,
//! cross-attention over text tokens, tanh MLP), each with a residual
//! connection. Normalisation is a parameter-free row-wise RMS scaling.
//! Parameters are drawn from a seeded generator and never trained.
//!
//! Block layout for a latent of `H x W` (16 self-attention blocks):
//!
//! | blocks | section | grid |
//! |--------|---------|------|
//! | 1-2    | encoder | `H x W` |
//! | 3-4    | encoder | `H/2 x W/2` |
//! | 5-6    | encoder | `H/4 x W/4` |
//! | 7      | mid     | `H/4 x W/4` |
//! | 8-10   | decoder | `H/4 x W/4` |
//! | 11-13  | decoder | `H/2 x W/2` |
//! | 14-16  | decoder | `H x W` |
//!
//! Every block carries a cross-attention layer. Encoder outputs at each grid
//! are added back at the start of the decoder stage with the same grid.

mod arch;
mod codec;
mod model;
mod noise;
mod params;
mod text;

pub use arch::{Op, ToyArchitecture};
pub use codec::{decode_latent, encode_image, masked_image_latent, mask_latent, DOWNSCALE};
pub use model::{CapturedSelf, Conditioning, DenoiseOutput, ToyDenoiser, ToySteerPass, ToyTape};
pub use noise::{NoiseSchedule, TRAIN_TIMESTEPS};
pub use params::{BlockParams, ToyParams};
pub use text::ToyTextEmbedding;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub text_dim: usize,
    pub tokens: usize,
    pub param_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 32,
            width: 32,
            model_dim: 16,
            mlp_dim: 32,
            text_dim: 16,
            tokens: 8,
            param_seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn with_latent(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "toy latent must be a multiple of 4 on each side, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels < 1 || self.model_dim < 2 || !self.model_dim.is_multiple_of(2) {
            return Err(Error::invalid("toy needs >= 1 channel and an even model dim >= 2"));
        }
        if self.mlp_dim == 0 || self.text_dim == 0 || self.tokens < 2 {
            return Err(Error::invalid("toy needs mlp/text dims >= 1 and at least 2 tokens"));
        }
        Ok(())
    }
}
