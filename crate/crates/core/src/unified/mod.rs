//! Autoregressive backbone with a flow-matching DiT head over latent
//! patches: speech synthesis and transcription in one model.

pub mod layout;
pub mod model;
pub mod patch;
pub mod sample;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use layout::{build_layout, LayoutTask, Marker, SequenceLayout, Token, TEXT_VOCAB, VOCAB};
pub use model::{PatchMode, UnifiedConfig};
pub use patch::{patchify, unpatchify, PatchSequence};
pub use sample::{generate, transcribe, Generation};
pub use train::{prepare_examples, train_downstream, DownstreamConfig, DownstreamLog, Example, LatentSource, Tasks};

use crate::enrich::EnrichConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};
use crate::pipeline::checkpoint::{load_checkpoint, validate_against};
use crate::pipeline::stages::Tokenizer;

/// Downstream parameters with their configuration. In mean-pool mode the
/// supervision encoder is copied in from the tokenizer under `sup.enc`.
#[derive(Debug, Clone)]
pub struct UnifiedModel {
    pub cfg: UnifiedConfig,
    pub enrich: EnrichConfig,
    pub params: ParameterSet,
}

impl UnifiedModel {
    pub fn new(cfg: UnifiedConfig, tok: &Tokenizer, seed: u64) -> Result<Self> {
        if cfg.latent_dim != tok.codec.cfg.latent_dim {
            return Err(Error::Config(format!(
                "downstream latent_dim {} does not match the tokenizer's {}",
                cfg.latent_dim, tok.codec.cfg.latent_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = model::init_unified(&cfg, tok.enrich.sup_width, &mut rng)?;
        if cfg.patch_mode == PatchMode::MeanPoolLinear {
            params.copy_from(&tok.gen, "sup.enc");
        }
        Ok(Self { cfg, enrich: tok.enrich.clone(), params })
    }

    /// Latent RMS the flow divides by; 1 until fitted.
    pub fn latent_scale(&self) -> f64 {
        self.params.get(model::LATENT_SCALE).map_or(1.0, |t| t.data()[0])
    }

    /// Sets the latent scale to the RMS of `examples`' latents, so the
    /// flow's targets have roughly the spread of its unit-normal noise.
    pub fn fit_latent_scale(&mut self, examples: &[train::Example]) -> Result<f64> {
        let (sum, n) = examples.iter().fold((0.0, 0usize), |(s, n), e| (s + e.z.data().iter().map(|v| v * v).sum::<f64>(), n + e.z.numel()));
        let rms = (sum / n.max(1) as f64).sqrt();
        if !(rms > 0.0 && rms.is_finite()) {
            return Err(Error::invalid(format!("latent scale needs nonzero finite latents, got RMS {rms}")));
        }
        self.params.set(model::LATENT_SCALE, Tensor::new(vec![1], vec![rms])?)?;
        Ok(rms)
    }

    /// TTS generation needs each patch embedding to depend only on its own
    /// and earlier frames.
    pub fn check_tasks(&self, tasks: Tasks) -> Result<()> {
        if tasks != Tasks::Asr && self.cfg.patch_mode == PatchMode::MeanPoolLinear && !self.enrich.causal_encoder {
            return Err(Error::Config(
                "speech generation in mean_pool_linear mode requires causal_supervision_encoder".into(),
            ));
        }
        Ok(())
    }

    /// Copies every `dit.*` tensor from a checkpoint of a compatible model.
    pub fn init_dit_from(&mut self, path: &Path) -> Result<usize> {
        let loaded = load_checkpoint(path)?;
        let mut expected = ParameterSet::new();
        for (n, t) in self.params.iter().filter(|(n, _)| n.starts_with("dit.")) {
            expected.insert(n, t.clone())?;
        }
        let mut dit = ParameterSet::new();
        for (n, t) in loaded.iter().filter(|(n, _)| n.starts_with("dit.")) {
            dit.insert(n, t.clone())?;
        }
        validate_against(&dit, &expected)?;
        Ok(self.params.copy_from(&dit, "dit."))
    }

    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let loaded = load_checkpoint(path)?;
        validate_against(&loaded, &self.params)?;
        let frozen: Vec<String> = self.params.frozen_prefixes().map(String::from).collect();
        self.params = loaded;
        frozen.into_iter().for_each(|p| self.params.freeze(p));
        Ok(())
    }
}
