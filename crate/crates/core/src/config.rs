//! JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::SynthSpec;
use crate::data::DEFAULT_PLANE;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::EncoderConfig;
use crate::pretrain::PretrainConfig;
use crate::tensor::Scalar;

pub const SEED_ENV: &str = "SBSSL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub plane: String,
    pub train_split: String,
    pub valid_split: String,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            plane: DEFAULT_PLANE.to_string(),
            train_split: "train".into(),
            valid_split: "valid".into(),
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: String,
    pub threshold: Scalar,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "valid".into(),
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnConfig {
    /// 1-indexed block; `None` picks block 10, or round(5L/6) when L < 10.
    pub layer: Option<usize>,
    pub alpha: Scalar,
    pub split: String,
    /// Exams drawn at random when none is named on the command line.
    pub count: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            layer: None,
            alpha: crate::attention::DEFAULT_ALPHA,
            split: "valid".into(),
            count: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory under which each subcommand writes its outputs.
    pub output: PathBuf,
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub attn: AttnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            seed: 0,
            output: PathBuf::from("runs"),
            model: EncoderConfig::nano().with_image(data.synth.image_size, 8),
            data,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            attn: AttnConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Apply the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |r: std::result::Result<(), String>| r.map_err(Error::Config);
        cfg(self.model.validate())?;
        cfg(self.data.synth.validate())?;
        cfg(self.pretrain.validate(&self.model))?;
        cfg(self.finetune.validate())?;
        if !(0.0..=1.0).contains(&self.attn.alpha) {
            return Err(Error::Config(format!("attn.alpha {} outside [0, 1]", self.attn.alpha)));
        }
        if let Some(layer) = self.attn.layer {
            if layer == 0 || layer > self.model.depth {
                return Err(Error::Config(format!("attn.layer {layer} outside 1..={}", self.model.depth)));
            }
        }
        Ok(())
    }

    /// Write the resolved configuration as `config.json` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrip_and_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pretrain": {"epoch": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"depth": 2, "heads": 2, "embed_dim": 8}}"#).is_ok());
    }

    #[test]
    fn partial_sections_use_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 7, "finetune": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.finetune.epochs, 3);
        assert_eq!(c.finetune.batch_size, FinetuneConfig::default().batch_size);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut c = RunConfig::default();
        c.data.synth.positive_rate = 1.5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.pretrain.skip_blocks = Some(vec![9]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
