//! Run configuration: TOML on disk, SHA-256 digest for naming outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aucodes::{AuOrder, PromptStyle, TemplateBank};
use crate::augment::AugConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::Aggregation;
use crate::losses::LossConfig;
use crate::numerics::{AdamWConfig, LrSchedule};
use crate::synthdata::SynthConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    /// Prompts built from AU descriptions.
    #[default]
    Au,
    /// Prompts naming the emotion class.
    Emotion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub source: PromptSource,
    pub style: PromptStyle,
    pub order: AuOrder,
    pub num_templates: usize,
    pub embedder_seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            source: PromptSource::Au,
            style: PromptStyle::Action,
            order: AuOrder::Fixed,
            num_templates: 7,
            embedder_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        let s = LrSchedule::default();
        OptimConfig {
            base_lr: s.base_lr,
            warmup_epochs: s.warmup_epochs,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aggregation: Aggregation,
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugConfig,
    pub prompt: PromptConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 55,
            batch_size: 16,
            aggregation: Aggregation::Pooled,
            output_dir: PathBuf::from("runs"),
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augment: AugConfig::default(),
            prompt: PromptConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config serialize: {e}")))
    }

    /// Loss settings with the epoch count filled in.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            total_epochs: self.epochs,
            ..self.loss.clone()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.optim.base_lr,
            warmup_epochs: self.optim.warmup_epochs,
            total_epochs: self.epochs,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
        }
    }

    pub fn templates(&self) -> Result<TemplateBank> {
        TemplateBank::first(self.prompt.num_templates)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        self.synth.validate().map_err(|e| match e {
            Error::Contract(m) => Error::Config(m),
            e => e,
        })?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.adamw().validate()?;
        if self.epochs > 0 {
            self.schedule().validate()?;
        }
        self.augment.validate()?;
        self.templates()?;
        let classes = self.synth.emotion_mode.class_names().len();
        if self.encoder.num_classes != classes {
            return Err(Error::config(format!(
                "encoder.num_classes {} does not match {} synthetic classes",
                self.encoder.num_classes, classes
            )));
        }
        if (self.synth.height, self.synth.width, self.synth.channels)
            != (
                self.encoder.height,
                self.encoder.width,
                self.encoder.channels,
            )
        {
            return Err(Error::config("synth and encoder frame sizes differ"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, excluding the output path.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// First 12 hex digits of [`digest`](Self::digest), used in file names.
    pub fn short_digest(&self) -> String {
        self.digest()[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_keeps_digest() {
        let mut cfg = RunConfig::default();
        cfg.optim.base_lr = 1.0 / 3.0;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert_eq!(cfg.short_digest().len(), 12);
    }

    #[test]
    fn digest_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            ..RunConfig::default()
        };
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("epochs = 3\n[encoder]\nd1 = 8\nheads = 2\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.encoder.d1, 8);
        assert_eq!(cfg.batch_size, 16);
        assert!(RunConfig::from_toml("nonsense = 1").is_err());
    }

    #[test]
    fn default_is_valid() {
        RunConfig::default().validate().unwrap();
        let bad = RunConfig {
            batch_size: 0,
            ..RunConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
