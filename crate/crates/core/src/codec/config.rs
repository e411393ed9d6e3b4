use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the tokenizer codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub strides: Vec<usize>,
    pub kernels: Vec<usize>,
    /// Width after the input conv; doubles at every downsampling block.
    pub base_channels: usize,
    pub latent_dim: usize,
    pub residual_layers: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub lookahead_frames: usize,
    /// Kernel sizes of the parallel branches in each decoder AMP block.
    pub amp_kernels: Vec<usize>,
    /// Dilations of the residual units in each AMP branch.
    pub amp_dilations: Vec<usize>,
    /// Initial value of the posterior log-scale bias.
    pub log_sigma_init: f64,
}

impl CodecConfig {
    /// 8 kHz desk-scale configuration: hop 64, 125 latent frames per second.
    pub fn toy() -> Self {
        Self {
            sample_rate: 8000,
            strides: vec![2, 2, 4, 4],
            kernels: vec![4, 4, 8, 8],
            base_channels: 4,
            latent_dim: 8,
            residual_layers: 2,
            lstm_layers: 2,
            lstm_hidden: 32,
            flow_layers: 2,
            flow_hidden: 16,
            lookahead_frames: 2,
            amp_kernels: vec![3, 7],
            amp_dilations: vec![1, 3],
            log_sigma_init: -3.0,
        }
    }

    /// Full 48 kHz configuration: hop 1920, 25 latent frames per second.
    pub fn paper() -> Self {
        Self {
            sample_rate: 48000,
            strides: vec![2, 2, 2, 4, 6, 10],
            kernels: vec![4, 4, 4, 8, 12, 20],
            base_channels: 12,
            latent_dim: 128,
            residual_layers: 6,
            lstm_layers: 4,
            lstm_hidden: 256,
            flow_layers: 4,
            flow_hidden: 256,
            lookahead_frames: 2,
            amp_kernels: vec![3, 7, 11],
            amp_dilations: vec![1, 3, 5],
            log_sigma_init: -3.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy or paper)"))),
        }
    }

    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    /// Latent frames per second.
    pub fn frame_rate(&self) -> u32 {
        self.sample_rate / self.hop() as u32
    }

    /// Channel width after block `i` (`i = 0` is the input conv).
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn top_channels(&self) -> usize {
        self.channels(self.strides.len())
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.strides.is_empty() || self.strides.len() != self.kernels.len() {
            return bad(format!(
                "{} strides vs {} kernels",
                self.strides.len(),
                self.kernels.len()
            ));
        }
        if self.strides.iter().zip(&self.kernels).any(|(&s, &k)| s == 0 || k < s) {
            return bad("every kernel must be at least its stride".into());
        }
        if self.sample_rate as usize % self.hop() != 0 {
            return bad(format!("hop {} does not divide {} Hz", self.hop(), self.sample_rate));
        }
        if self.latent_dim < 2 || self.latent_dim % 2 != 0 {
            return bad("latent_dim must be even (coupling splits it in halves)".into());
        }
        if self.amp_kernels.iter().any(|k| k % 2 == 0) || self.amp_kernels.is_empty() {
            return bad("AMP kernels must be odd".into());
        }
        if self.lookahead_frames == 0 {
            return bad("lookahead_frames must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_rates() {
        let p = CodecConfig::paper();
        assert_eq!((p.hop(), p.frame_rate(), p.top_channels()), (1920, 25, 768));
        let t = CodecConfig::toy();
        assert_eq!((t.hop(), t.frame_rate(), t.top_channels()), (64, 125, 64));
        p.validate().unwrap();
        t.validate().unwrap();
    }
}
