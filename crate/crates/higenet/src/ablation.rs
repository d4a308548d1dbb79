//! Ablation sweep: every requested variant trained and tested at every
//! horizon on the same splits, windows, seed and hyperparameters.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use higenet_core::data::{Metrics, Task, TimeSeriesFrame};
use higenet_core::model::{Model, ModelConfig, Variant};
use higenet_core::train::{evaluate, train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, EvalConfig, Preprocessing, RunConfig};
use crate::error::{Error, Result};
use crate::pipeline::prepare;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub horizons: Vec<usize>,
    pub variants: Vec<Variant>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocessing: Preprocessing,
    pub task: Task,
    pub eval_windows: Option<usize>,
}

impl AblationConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        AblationConfig {
            horizons: vec![model.pred_len],
            variants: Variant::ALL.to_vec(),
            model,
            train,
            preprocessing: Preprocessing::default(),
            task: Task::Univariate,
            eval_windows: None,
        }
    }
}

/// Which kernels a variant actually runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub embedding: String,
    pub distill: String,
    pub encoder_attention: String,
    pub decoder_self_attention: String,
    pub decoder_cross_attention: String,
}

impl Provenance {
    pub fn of(cfg: &ModelConfig) -> Self {
        let v = cfg.variant;
        Provenance {
            embedding: if v.embedding { "gated" } else { "plain" }.into(),
            distill: match v.distill_kind() {
                higenet_core::encoder::DistillKind::Higenet => "parallel_pool",
                higenet_core::encoder::DistillKind::InformerMaxpool => "maxpool",
            }
            .into(),
            encoder_attention: cfg.encoder().attention.kind.name().into(),
            decoder_self_attention: cfg.decoder_self().kind.name().into(),
            decoder_cross_attention: cfg.decoder_cross().kind.name().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub components: String,
    pub horizon: usize,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub provenance: Provenance,
    pub parameters: usize,
    pub train_seconds: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<Metrics>,
    /// Attention work in one forward pass on the first test window.
    pub dot_products: u64,
    pub sampled_dot_products: u64,
    pub conv_passes: u64,
    pub decoder_passes: usize,
}

fn run_one(cfg: &AblationConfig, mc: ModelConfig, prepared: &crate::pipeline::Prepared, row: &mut AblationRow) -> Result<()> {
    let mut model = Model::new(mc, cfg.train.seed)?;
    row.parameters = model.num_params();
    let t = Instant::now();
    let history = train(&mut model, &prepared.train, Some(&prepared.val), &cfg.train)?;
    row.train_seconds = t.elapsed().as_secs_f64();
    row.steps = history.steps();
    row.test = Some(evaluate(&model, &prepared.test, cfg.train.seed, cfg.eval_windows)?);
    let probe = prepared.test.get(0)?;
    let f = model.forecast(&probe, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    row.dot_products = f.stats.budget.dot_products;
    row.sampled_dot_products = f.stats.budget.sampled_dot_products;
    row.conv_passes = f.stats.budget.conv_passes;
    row.decoder_passes = f.stats.decoder_passes;
    Ok(())
}

/// Runs the sweep. A variant that fails is reported with `status = "failed"`
/// and the sweep carries on.
pub fn run_ablation(
    cfg: &AblationConfig,
    frame: &TimeSeriesFrame,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if cfg.horizons.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Config("ablation needs at least one horizon and one variant".into()));
    }
    let mut rows = Vec::new();
    for &h in &cfg.horizons {
        let mut base = cfg.model;
        base.pred_len = h;
        let run = RunConfig {
            dataset: DatasetConfig {
                path: PathBuf::new(),
                schema: higenet_core::data::SchemaKind::Generic,
                target: None,
                task: cfg.task,
            },
            preprocessing: cfg.preprocessing,
            model: base,
            train: cfg.train,
            variant: None,
            eval: EvalConfig::default(),
        };
        let prepared = prepare(&run, frame)?;
        for &v in &cfg.variants {
            let mut mc = prepared.model_config;
            mc.variant = v;
            let mut row = AblationRow {
                variant: v.name().into(),
                components: v.components(),
                horizon: h,
                status: "ok".into(),
                error: None,
                provenance: Provenance::of(&mc),
                parameters: 0,
                train_seconds: 0.0,
                steps: 0,
                test: None,
                dot_products: 0,
                sampled_dot_products: 0,
                conv_passes: 0,
                decoder_passes: 0,
            };
            if let Err(e) = run_one(cfg, mc, &prepared, &mut row) {
                row.status = "failed".into();
                row.error = Some(e.to_string());
            }
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Fixed-width text table, one line per row.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<6} {:>7} {:>9} {:>9} {:>9} {:>12} {:>6} {:>9}  status",
        "variant", "comp", "horizon", "corr", "mse", "mae", "dot_products", "conv", "train_s"
    );
    for r in rows {
        let (corr, mse, mae) = r.test.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.corr, m.mse, m.mae));
        let _ = writeln!(
            s,
            "{:<8} {:<6} {:>7} {:>9.4} {:>9.4} {:>9.4} {:>12} {:>6} {:>9.2}  {}",
            r.variant, r.components, r.horizon, corr, mse, mae, r.dot_products, r.conv_passes, r.train_seconds, r.status
        );
    }
    s
}
