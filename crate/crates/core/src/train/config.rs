use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anonymize::AnonSpec;
use crate::losses::LossWeights;
use crate::model::CodecConfig;

use super::TrainError;

/// AdamW settings, schedule and run length. Generator and discriminator
/// share them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Multiplies the learning rate once per pass over the training set.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-4, lr_decay: 0.99, beta1: 0.8, beta2: 0.99, eps: 1e-8, weight_decay: 1e-5, steps: 50_000, batch_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// JSON-lines manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    /// Training segment length in codec frames.
    pub segment_frames: usize,
    /// Utterances per speaker kept out of training for the speaker
    /// classification check.
    pub holdout_per_speaker: usize,
    pub out_dir: PathBuf,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            segment_frames: 50,
            holdout_per_speaker: 2,
            out_dir: PathBuf::from("run"),
            checkpoint_every: 0,
        }
    }
}

/// Everything a run needs. Serialized verbatim into checkpoints and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: CodecConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub anon: AnonSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: CodecConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            anon: AnonSpec::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale preset for the synthetic corpus.
    pub fn toy() -> Self {
        Self {
            model: CodecConfig::toy(),
            optim: OptimConfig { lr: 3e-4, lr_decay: 0.999, steps: 2000, batch_size: 8, ..OptimConfig::default() },
            data: DataConfig { segment_frames: 16, ..DataConfig::default() },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config; relative data paths are taken relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TrainError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.manifest, &mut cfg.data.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::ConfigInvalid(m));
        self.model.validate().map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        self.loss.validate().map_err(TrainError::ConfigInvalid)?;
        self.anon.validate().map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return bad(format!("optim.lr must be > 0, got {}", o.lr));
        }
        if !(o.lr_decay > 0.0 && o.lr_decay <= 1.0) {
            return bad(format!("optim.lr_decay must be in (0, 1], got {}", o.lr_decay));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return bad("optim betas must be in [0, 1), eps > 0, weight_decay >= 0".into());
        }
        if o.steps == 0 {
            return bad("optim.steps must be >= 1".into());
        }
        if o.batch_size == 0 {
            return bad("optim.batch_size must be >= 1".into());
        }
        if self.data.segment_frames == 0 {
            return bad("data.segment_frames must be >= 1".into());
        }
        if self.model.num_quantizers < 2 {
            return bad("model.num_quantizers must be >= 2 (layer 2 carries the F0 target)".into());
        }
        Ok(())
    }
}
