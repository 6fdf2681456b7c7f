//! Run configuration: one document covering data, models, training and
//! evaluation, with desk and full presets, TOML files and dotted-key
//! overrides (`train.epochs=5`).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::damsm::DamsmConfig;
use crate::data::SyntheticSceneSpec;
use crate::discriminators::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::objectives::{LossWeights, Variant};
use crate::text_encoder::TextEncoderConfig;
use crate::vqa::VqaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected desk or full)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

/// Which pyramid stages contribute adversarial terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StagesInLoss {
    #[default]
    All,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Prepared dataset directory (relative paths resolve under the output root).
    pub dir: PathBuf,
    /// QA samples per caption sample in each step.
    pub qa_ratio: f64,
    /// Vocabulary threshold for real annotations.
    pub min_frequency: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            qa_ratio: 1.0,
            min_frequency: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub scene: SyntheticSceneSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 48,
            scene: SyntheticSceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub damsm_epochs: usize,
    pub vqa_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Include QA texts when pretraining the text encoder.
    pub pretrain_with_qa: bool,
    /// Train the scene-class head used for image statistics (synthetic data only).
    pub class_head: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            damsm_epochs: 10,
            vqa_epochs: 15,
            batch_size: 16,
            lr: 2e-3,
            pretrain_with_qa: true,
            class_head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub d_steps: usize,
    pub checkpoint_every: usize,
    /// Evaluate saved checkpoints every this many epochs (0: never during training).
    pub eval_every: usize,
    pub loss: LossWeights,
    pub stages_in_loss: StagesInLoss,
    /// Epochs excluded from the reported discriminator accuracy.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            epochs: 30,
            batch_size: 16,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            d_steps: 1,
            checkpoint_every: 5,
            eval_every: 0,
            loss: LossWeights::default(),
            stages_in_loss: StagesInLoss::All,
            warmup_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub is_splits: usize,
    pub r_precision_distractors: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            is_splits: 10,
            r_precision_distractors: 99,
            batch_size: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub text: TextEncoderConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub damsm: DamsmConfig,
    pub vqa: VqaConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let mut c = match preset {
            Preset::Desk => Self {
                preset,
                seed: 0,
                data: DataConfig::default(),
                synth: SynthConfig::default(),
                text: TextEncoderConfig::desk(),
                generator: GeneratorConfig::desk(),
                discriminator: DiscriminatorConfig::desk(),
                damsm: DamsmConfig::default(),
                vqa: VqaConfig::desk(),
                pretrain: PretrainConfig::default(),
                train: TrainConfig::default(),
                eval: EvalConfig::default(),
            },
            Preset::Full => Self {
                preset,
                seed: 0,
                data: DataConfig::default(),
                synth: SynthConfig::default(),
                text: TextEncoderConfig::full(),
                generator: GeneratorConfig::full(),
                discriminator: DiscriminatorConfig::full(),
                damsm: DamsmConfig {
                    channels: [128, 256],
                    ..DamsmConfig::default()
                },
                vqa: VqaConfig::full(),
                pretrain: PretrainConfig {
                    damsm_epochs: 200,
                    vqa_epochs: 30,
                    batch_size: 48,
                    lr: 2e-4,
                    pretrain_with_qa: true,
                    class_head: false,
                },
                train: TrainConfig {
                    epochs: 120,
                    batch_size: 20,
                    checkpoint_every: 5,
                    eval_every: 5,
                    ..TrainConfig::default()
                },
                eval: EvalConfig {
                    n_samples: 30000,
                    ..EvalConfig::default()
                },
            },
        };
        c.sync_dims();
        c
    }

    /// Copy dimensions that are implied by other sections.
    pub fn sync_dims(&mut self) {
        let d = self.text.feature_dim();
        let r = self.generator.final_resolution();
        self.generator.text_dim = d;
        self.damsm.feature_dim = d;
        self.damsm.resolution = r;
        self.vqa.resolution = r;
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        // start from the named preset, then lay the file on top
        let preset = match value.get("preset") {
            Some(toml::Value::String(p)) => p.parse()?,
            Some(_) => return Err(Error::Config("preset must be a string".into())),
            None => Preset::Desk,
        };
        let mut merged = Self::preset(preset).to_value()?;
        merge(&mut merged, value, "")?;
        let mut c: Config = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.sync_dims();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn to_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `key=value`; the key must already exist. Values are parsed as
    /// TOML literals, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let mut root = self.to_value()?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        *slot = match (&*slot, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (toml::Value::String(_), v @ toml::Value::String(_)) => v,
            (toml::Value::String(_), _) => toml::Value::String(raw.to_string()),
            (_, v) => v,
        };
        let mut c: Config = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid value for `{key}`: {e}")))?;
        if key == "preset" && c.preset != self.preset {
            let seed = c.seed;
            c = Self::preset(c.preset);
            c.seed = seed;
        }
        c.sync_dims();
        *self = c;
        Ok(())
    }

    /// Every settable key with its current value, in document order.
    pub fn keys(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        flatten(&self.to_value()?, "", &mut out);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if t.batch_size < 2 || self.pretrain.batch_size < 2 {
            return Err(Error::Config("batch sizes must be >= 2 (contrastive loss)".into()));
        }
        for (k, v) in [("train.lr_g", t.lr_g), ("train.lr_d", t.lr_d), ("pretrain.lr", self.pretrain.lr)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{k} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("train.beta1/beta2 must be in [0, 1)".into()));
        }
        if t.d_steps == 0 || t.checkpoint_every == 0 {
            return Err(Error::Config("train.d_steps and train.checkpoint_every must be >= 1".into()));
        }
        if !(self.data.qa_ratio >= 0.0) {
            return Err(Error::Config("data.qa_ratio must be >= 0".into()));
        }
        if self.eval.is_splits == 0 {
            return Err(Error::Config("eval.is_splits must be >= 1".into()));
        }
        self.generator.validate()?;
        Ok(())
    }

    /// Short digest of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        let s = serde_json::to_string(self)?;
        Ok(hex::encode(&Sha256::digest(s.as_bytes())[..8]))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value, prefix: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }
        }
        (slot @ toml::Value::Float(_), toml::Value::Integer(i)) => *slot = toml::Value::Float(i as f64),
        (slot, v) => *slot = v,
    }
    Ok(())
}

fn flatten(v: &toml::Value, prefix: &str, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(v, &key, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
