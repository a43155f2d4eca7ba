//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "model": { "layers": 2, "d_model": 32, "n_heads": 2, "state_size": 16,
//!              "vocab": 2, "d_visual": 8, "d_raw": 8, "max_len": 6 },
//!   "train": {
//!     "pretrain": { "stage": "pretrain", "steps": 500, "lr": 0.01, "batch_size": 64 },
//!     "finetune": { "stage": "finetune", "steps": 1000, "lr": 0.01, "batch_size": 64 }
//!   },
//!   "data": { "size": 2000, "d_raw": 8, "caption_len": 6, "vocab": 2, "seed": 7 },
//!   "eval": { "sigmas": [0, 0.5, 1, 2, 5, 10], "seeds": [0, 1, 2, 3, 4] },
//!   "paths": { "checkpoint": "run/model.ssmi", "report": "run/report.txt", "log": "run/train.log" }
//! }
//! ```
//!
//! Defaults:
//!
//! | field                      | default                 |
//! |----------------------------|-------------------------|
//! | `model.visual_mode`        | `"additive"`            |
//! | `model.ablation`           | `"none"`                |
//! | `model.ssm_init_scale`     | `0.5`                   |
//! | `train.*.lambda`           | `0.5`                   |
//! | `train.*.lr`               | `0.001`                 |
//! | `train.*.batch_size`       | `16`                    |
//! | `train.*.seed`             | `0`                     |
//! | `train.*.grad_clip`        | `1.0`                   |
//! | `train.*.log_every`        | `10`                    |
//! | `data.noise_sigma`         | `0`                     |
//! | `eval.sigmas`              | `[0, 0.5, 1, 2, 5, 10]` |
//! | `eval.seeds`               | `[0, 1, 2, 3, 4]`       |
//! | `paths.checkpoint`         | `"model.ssmi"`          |
//! | `paths.report`             | `"report.txt"`          |
//! | `paths.log`                | `"train.log"`           |
//!
//! Every other field is required. Unknown fields are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::eval::TwoStagePlan;
use crate::model::{Ablation, LvlmConfig, VisualMode};
use crate::training::{Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

fn default_sigmas() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 5.0, 10.0]
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self { sigmas: default_sigmas(), seeds: default_seeds() }
    }
}

fn default_checkpoint() -> PathBuf {
    "model.ssmi".into()
}
fn default_report() -> PathBuf {
    "report.txt".into()
}
fn default_log() -> PathBuf {
    "train.log".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default = "default_report")]
    pub report: PathBuf,
    #[serde(default = "default_log")]
    pub log: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { checkpoint: default_checkpoint(), report: default_report(), log: default_log() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: LvlmConfig,
    pub train: TrainPlan,
    pub data: DatasetSpec,
    #[serde(default)]
    pub eval: EvalPlan,
    #[serde(default)]
    pub paths: Paths,
}

impl ExperimentConfig {
    /// Parses and validates. Syntax and schema errors carry serde's line and
    /// column and name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| match e {
            Error::Config(m) | Error::Contract(m) => Error::Config(m),
            other => other,
        };
        self.model.validate()?;
        self.data.validate().map_err(config)?;
        for (name, cfg, stage) in
            [("pretrain", &self.train.pretrain, Stage::Pretrain), ("finetune", &self.train.finetune, Stage::Finetune)]
        {
            if cfg.stage != stage {
                return Err(Error::Config(format!("train.{name}.stage must be \"{}\"", stage.name())));
            }
            cfg.validate().map_err(config)?;
        }
        if self.data.d_raw != self.model.d_raw {
            return Err(Error::Config(format!("data.d_raw {} != model.d_raw {}", self.data.d_raw, self.model.d_raw)));
        }
        if self.data.vocab != self.model.vocab {
            return Err(Error::Config(format!("data.vocab {} != model.vocab {}", self.data.vocab, self.model.vocab)));
        }
        if self.data.caption_len < 2 || self.data.caption_len > self.model.max_len + 1 {
            return Err(Error::Config(format!(
                "data.caption_len {} must lie in [2, model.max_len + 1 = {}]",
                self.data.caption_len,
                self.model.max_len + 1
            )));
        }
        if !self.eval.sigmas.contains(&0.0) || self.eval.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("eval.sigmas must be finite, nonnegative and include 0".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must be nonempty".into()));
        }
        for (name, p) in [("checkpoint", &self.paths.checkpoint), ("report", &self.paths.report), ("log", &self.paths.log)] {
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("paths.{name} must be nonempty")));
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        generate(&self.data)
    }

    pub fn plan(&self) -> TwoStagePlan {
        TwoStagePlan { model: self.model.clone(), pretrain: self.train.pretrain.clone(), finetune: self.train.finetune.clone() }
    }

    /// Reference synthetic task: binary captions of length 6 read from an
    /// 8-dimensional visual vector, 500 reconstruction steps and 1000
    /// task steps.
    pub fn reference() -> Self {
        let mut pretrain = TrainConfig::new(Stage::Pretrain, 500);
        pretrain.lr = 1e-2;
        pretrain.batch_size = 64;
        let mut finetune = TrainConfig::new(Stage::Finetune, 1000);
        finetune.lr = 1e-2;
        finetune.batch_size = 64;
        finetune.lambda = 0.5;
        Self {
            model: LvlmConfig {
                layers: 2,
                d_model: 32,
                n_heads: 2,
                state_size: 16,
                vocab: 2,
                d_visual: 8,
                d_raw: 8,
                max_len: 6,
                visual_mode: VisualMode::Additive,
                ablation: Ablation::None,
                ssm_init_scale: 0.5,
            },
            train: TrainPlan { pretrain, finetune },
            data: DatasetSpec { size: 2000, d_raw: 8, caption_len: 6, vocab: 2, seed: 7, noise_sigma: 0.0 },
            eval: EvalPlan::default(),
            paths: Paths::default(),
        }
    }
}
