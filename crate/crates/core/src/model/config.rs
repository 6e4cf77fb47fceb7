use serde::{Deserialize, Serialize};

use crate::signal::{MelConfig, YinConfig};

use super::ModelError;

/// Network sizes. `toy()` is the desk-scale preset used by the synthetic
/// experiments; `default()` follows the full-size layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub strides: Vec<usize>,
    pub base_channels: usize,
    pub encoder_out_dim: usize,
    pub lstm_layers: usize,
    pub speaker_dim: usize,
    pub speaker_hidden: usize,
    pub num_quantizers: usize,
    /// Rows per codebook, including the frozen zero row.
    pub codebook_size: usize,
    pub codebook_decay: f64,
    pub teacher_vocab: usize,
    pub disc_channels: usize,
    pub disc_scales: usize,
    pub toy_scale: bool,
    pub mel: MelConfig,
    pub f0: YinConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            strides: vec![2, 4, 5, 8],
            base_channels: 32,
            encoder_out_dim: 512,
            lstm_layers: 2,
            speaker_dim: 128,
            speaker_hidden: 256,
            num_quantizers: 8,
            codebook_size: 256,
            codebook_decay: 0.99,
            teacher_vocab: 64,
            disc_channels: 16,
            disc_scales: 3,
            toy_scale: false,
            mel: MelConfig::default(),
            f0: YinConfig::default(),
        }
    }
}

impl CodecConfig {
    pub fn toy() -> Self {
        Self {
            base_channels: 4,
            encoder_out_dim: 64,
            speaker_dim: 32,
            speaker_hidden: 64,
            codebook_size: 16,
            disc_channels: 4,
            codebook_decay: 0.9,
            toy_scale: true,
            ..Self::default()
        }
    }

    /// Samples per codec frame.
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    /// Channels after the last downsampling block.
    pub fn top_channels(&self) -> usize {
        self.base_channels << self.strides.len()
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::ConfigInvalid(m));
        if self.strides.len() != 4 || self.strides.contains(&0) {
            return bad(format!("need four positive strides, got {:?}", self.strides));
        }
        if self.hop() != self.mel.hop_length {
            return bad(format!("stride product {} != mel hop {}", self.hop(), self.mel.hop_length));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("encoder_out_dim", self.encoder_out_dim),
            ("speaker_dim", self.speaker_dim),
            ("speaker_hidden", self.speaker_hidden),
            ("teacher_vocab", self.teacher_vocab),
            ("disc_channels", self.disc_channels),
            ("disc_scales", self.disc_scales),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.num_quantizers < 2 {
            return bad("need at least two quantizers (linguistic and emotion layers)".into());
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be >= 2 (zero row plus one learned row)".into());
        }
        if !(self.codebook_decay > 0.0 && self.codebook_decay < 1.0) {
            return bad("codebook_decay must be in (0, 1)".into());
        }
        self.mel.validate().map_err(|e| ModelError::ConfigInvalid(e.to_string()))?;
        if self.mel.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        Ok(())
    }
}
