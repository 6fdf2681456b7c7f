//! Pretraining of the matching model and the VQA critic, adversarial
//! training under each variant, checkpoint series and best-checkpoint
//! selection.

mod gan;
mod pretrain;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;

pub use gan::{
    generator_objective, load_generator, train, Critics, GeneratorObjective, GeneratorSide, QaSide, StepRecord, TrainOutcome,
};
pub use pretrain::{
    pretrain_damsm, pretrain_vqa, scene_label, DamsmModels, DamsmPretrainReport, VqaBundle, VqaPretrainReport,
};

/// Where each artifact of a run lives under one output root.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
    pub data: PathBuf,
    pub damsm: PathBuf,
    pub vqa: PathBuf,
    pub runs: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path, cfg: &Config) -> Self {
        let data = if cfg.data.dir.is_absolute() {
            cfg.data.dir.clone()
        } else {
            root.join(&cfg.data.dir)
        };
        Self {
            root: root.to_path_buf(),
            data,
            damsm: root.join("pretrain").join("damsm.ckpt"),
            vqa: root.join("pretrain").join("vqa.ckpt"),
            runs: root.join("runs"),
        }
    }

    /// Directory of one adversarial run.
    pub fn run_dir(&self, cfg: &Config) -> PathBuf {
        self.runs.join(format!("{}-seed{}", cfg.train.variant, cfg.seed))
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINTS_FILE: &str = "checkpoints.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    pub is_mean: Option<f64>,
    pub config_hash: String,
    /// Parameter digests by model name.
    pub digests: BTreeMap<String, String>,
    pub path: PathBuf,
    #[serde(default)]
    pub eval: Option<EvalReport>,
}

/// Highest inception score; ties go to the later epoch. Checkpoints that
/// were never evaluated are ignored.
pub fn select_best_checkpoint(series: &[CheckpointMeta]) -> Result<&CheckpointMeta> {
    series
        .iter()
        .filter(|c| c.is_mean.is_some())
        .max_by(|a, b| {
            a.is_mean
                .partial_cmp(&b.is_mean)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.epoch.cmp(&b.epoch))
        })
        .ok_or_else(|| Error::InvalidInput("no evaluated checkpoint to select from".into()))
}

pub fn read_checkpoint_series(run_dir: &Path) -> Result<Vec<CheckpointMeta>> {
    let p = run_dir.join(CHECKPOINTS_FILE);
    if !p.exists() {
        return Ok(Vec::new());
    }
    crate::data::manifest::read_jsonl(&p)
}
