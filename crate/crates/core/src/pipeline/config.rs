//! Training configuration, loadable from JSON with every field optional.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use super::optim::{AdamWConfig, LrSchedule};
use crate::codec::CodecConfig;
use crate::error::{Error, Result};

/// Loss weights of the tokenizer objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub spec: f64,
    pub adv: f64,
    pub fm: f64,
    pub beta_low: f64,
    pub beta_high: f64,
    pub distill_frame: f64,
    pub distill_utt: f64,
    pub sup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { spec: 45.0, adv: 1.0, fm: 2.0, beta_low: 0.1, beta_high: 7.0, distill_frame: 1.0, distill_utt: 1.0, sup: 1.0 }
    }
}

/// Accepts `true`/`false` as well as `"on"`/`"off"`.
fn on_off<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Word(String),
    }
    match Flag::deserialize(d)? {
        Flag::Bool(b) => Ok(b),
        Flag::Word(w) => match w.as_str() {
            "on" => Ok(true),
            "off" => Ok(false),
            other => Err(serde::de::Error::custom(format!("expected on/off, got `{other}`"))),
        },
    }
}

/// Ablation switches for the Stage-III objective and the downstream model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    #[serde(deserialize_with = "on_off")]
    pub distill: bool,
    #[serde(deserialize_with = "on_off")]
    pub supervise: bool,
    pub causal_supervision_encoder: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { distill: true, supervise: true, causal_supervision_encoder: false }
    }
}

impl Ablation {
    /// Short tag used in log names.
    pub fn tag(&self) -> &'static str {
        match (self.distill, self.supervise) {
            (true, true) => "full",
            (false, true) => "no_distill",
            (true, false) => "no_supervise",
            (false, false) => "no_distill_no_supervise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub preset: String,
    pub stage: u32,
    /// `None` picks the per-stage default.
    pub steps: Option<usize>,
    pub seed: u64,
    pub batch: usize,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub crop_seconds: f64,
    pub loss_weights: LossWeights,
    pub ablation: Ablation,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            stage: 1,
            steps: None,
            seed: 0,
            batch: 4,
            corpus_size: 64,
            corpus_seed: 1,
            crop_seconds: 1.0,
            loss_weights: LossWeights::default(),
            ablation: Ablation::default(),
            optimizer: AdamWConfig::tokenizer(),
            schedule: LrSchedule::ExpDecay { lr0: TOY_LR, gamma: 0.9999996, floor: 1e-6 },
            precision: Precision::F32,
        }
    }
}

/// Initial learning rate at toy scale. The full-scale rate of 1e-4 barely
/// moves a freshly initialized toy codec within a few hundred steps.
pub const TOY_LR: f64 = 1e-3;

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        CodecConfig::preset(&self.preset)?;
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.batch == 0 || self.corpus_size == 0 {
            return Err(Error::Config("batch and corpus_size must be positive".into()));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::Config("crop_seconds must be positive".into()));
        }
        let w = &self.loss_weights;
        if [w.spec, w.adv, w.fm, w.beta_low, w.beta_high, w.distill_frame, w.distill_utt, w.sup].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if w.beta_high <= w.beta_low {
            return Err(Error::Config(format!("beta_high ({}) must exceed beta_low ({})", w.beta_high, w.beta_low)));
        }
        Ok(())
    }

    /// Step count for `stage`: the configured value or 300 / 200 / 200.
    pub fn steps_for(&self, stage: u32) -> usize {
        self.steps.unwrap_or(if stage == 1 { 300 } else { 200 })
    }

    /// Training crop length, rounded up to a whole number of latent frames.
    pub fn crop_samples(&self, cfg: &CodecConfig) -> usize {
        let n = (self.crop_seconds * cfg.sample_rate as f64).round() as usize;
        cfg.n_frames(n.max(1)) * cfg.hop()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_on_off_flags() {
        let c = TrainConfig::from_json(r#"{"stage": 3, "ablation": {"distill": "off", "supervise": true}}"#).unwrap();
        assert_eq!(c.stage, 3);
        assert!(!c.ablation.distill && c.ablation.supervise);
        assert_eq!(c.ablation.tag(), "no_distill");
        assert_eq!(c.loss_weights, LossWeights::default());
        assert_eq!(c.steps_for(1), 300);
        assert!(TrainConfig::from_json(r#"{"preset": "huge"}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"stage": 4}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"ablation": {"distill": "maybe"}}"#).is_err());
    }

    #[test]
    fn crop_is_whole_frames() {
        let c = TrainConfig::default();
        assert_eq!(c.crop_samples(&CodecConfig::toy()), 8000);
        let c = TrainConfig { crop_seconds: 0.01, ..c };
        assert_eq!(c.crop_samples(&CodecConfig::toy()), 128);
    }
}
