//! JSON run configuration.
//!
//! ```json
//! {
//!   "dataset": { "path": "data/ETTh1.csv", "schema": "ett", "task": "univariate" },
//!   "preprocessing": { "mode": "standardize_per_dim", "scope": "train_only" },
//!   "model": { "d_model": 512, "n_heads": 8, "input_len": 96, "label_len": 48, "pred_len": 24 },
//!   "train": { "lr": 0.0001, "batch_size": 32, "epochs": 20, "seed": 0 },
//!   "variant": "full",
//!   "eval": { "windows": null, "original_units": false }
//! }
//! ```
//!
//! Every section except `dataset` may be omitted. Unknown keys are
//! rejected. `model.d_x` and `model.d_y` are derived from the data and task.

use std::path::{Path, PathBuf};

use higenet_core::data::{FitScope, ScaleMode, SchemaKind, Task};
use higenet_core::model::{ModelConfig, Variant};
use higenet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub schema: SchemaKind,
    /// Target column; defaults to the schema's target or the last column.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub task: Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Preprocessing {
    pub mode: ScaleMode,
    pub scope: FitScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate on at most this many evenly spaced windows.
    pub windows: Option<usize>,
    /// Report metrics after undoing the scaling.
    pub original_units: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub preprocessing: Preprocessing,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Ablation variant name (`none`, `M0`…`M5`, `full`); overrides
    /// `model.variant`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(name) = cfg.variant.take() {
            cfg.model.variant = Variant::from_name(&name)
                .ok_or_else(|| Error::Config(format!("variant: unknown variant {name:?}")))?;
        }
        Ok(cfg)
    }

    /// Reads the file; a relative dataset path is resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.dataset.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.path = dir.join(&cfg.dataset.path);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
