//! Continuous speech tokenizer with a causal VAE codec, progressive
//! three-stage training, and an autoregressive + diffusion-transformer
//! unified model on top of its latents.

pub mod adversary;
pub mod codec;
pub mod dsp;
pub mod enrich;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod rates;
pub mod unified;
pub mod verify;

pub use error::{Error, Result};
