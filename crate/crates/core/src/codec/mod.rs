//! HoliTok codec: causal convolutional encoder, variational bottleneck with
//! a coupling flow, and an AMP-block decoder.

pub mod bottleneck;
mod config;
mod model;
mod probe;

pub use bottleneck::{kl_closed_form, kl_with_flow, posterior, sample_reparameterized, Posterior};
pub use config::CodecConfig;
pub use model::{Codec, ConvLayer, ConvRole, LEAKY_SLOPE};
pub use probe::{causality_probe, LayerProbe, ProbeOptions, ProbeReport};
