//! Attention-level interceptors for training-free diffusion inpainting.
//!
//! Three mechanisms operate on a denoiser's attention blocks:
//!
//! * [`sams`] reweights post-softmax self-attention so that patches inside the
//!   mask and patches outside it stop exchanging information.
//! * [`steer`] concentrates prompt-token cross-attention inside the mask by
//!   gradient descent on the noisy latent.
//! * [`makvs`] injects the unmasked region's mean key/value into the masked
//!   region through a concatenated-key attention.
//!
//! [`schedule`] decides which mechanism runs at each sampler step, [`toy`]
//! provides a deterministic miniature denoiser with real attention blocks, and
//! [`pipeline`] drives complete runs against any [`pipeline::BackendAdapter`].
//! [`analysis`] holds the PCA diagnostics and the attention dump format.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod hooks;
pub mod kv;
pub mod latent;
pub mod makvs;
pub mod mask;
pub mod pipeline;
pub mod sams;
pub mod schedule;
pub mod seed;
pub mod steer;
pub mod toy;

pub use error::{Error, Result};
pub use latent::Latent;
