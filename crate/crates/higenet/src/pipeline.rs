//! Load → split → scale → window → train / evaluate / forecast.

use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;
use higenet_core::checkpoint;
use higenet_core::data::{
    fit_apply_scaler, metrics_multi, split_622, MetricMean, Metrics, ScaledSplits, Scaler, TimeSeriesFrame,
    WindowSet,
};
use higenet_core::model::{Model, ModelConfig};
use higenet_core::train::{eval_indices, train, History};
use higenet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::csv_io::{load_csv, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};

/// Everything needed to train or evaluate one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model_config: ModelConfig,
    pub splits: ScaledSplits,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

/// Splits 6:2:2, fits the scaler, builds windows and fills in `d_x`/`d_y`.
pub fn prepare(cfg: &RunConfig, frame: &TimeSeriesFrame) -> Result<Prepared> {
    let mut mc = cfg.model;
    let spec = mc.window_spec(cfg.dataset.task);
    let (tr, va, te) = split_622(frame, spec.span())?;
    let splits = fit_apply_scaler(&tr, &va, &te, cfg.preprocessing.mode, cfg.preprocessing.scope)?;
    let train = WindowSet::new(splits.train.clone(), spec)?;
    let val = WindowSet::new(splits.val.clone(), spec)?;
    let test = WindowSet::new(splits.test.clone(), spec)?;
    mc.d_x = train.d_x();
    mc.d_y = train.d_y();
    mc.validate()?;
    Ok(Prepared {
        model_config: mc,
        splits,
        train,
        val,
        test,
    })
}

pub fn load_and_prepare(cfg: &RunConfig) -> Result<Prepared> {
    let frame = load_csv(&cfg.dataset.path, cfg.dataset.schema, cfg.dataset.target.as_deref())?;
    prepare(cfg, &frame)
}

fn eval_rng(seed: u64, start: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ start as u64)
}

/// Per-window metric mean over `set`; with `original_units` both truth
/// and forecast are mapped back through the scaler first.
pub fn evaluate_split(
    model: &Model,
    set: &WindowSet,
    scaler: &Scaler,
    original_units: bool,
    seed: u64,
    limit: Option<usize>,
) -> Result<Metrics> {
    let cols = set.output_columns();
    let mut acc = MetricMean::default();
    for i in eval_indices(set.len(), limit) {
        let w = set.get(i)?;
        let pred = model.forecast(&w, &mut eval_rng(seed, w.start))?.values;
        let (y, p) = if original_units {
            (scaler.inverse_tensor(&w.target, cols)?, scaler.inverse_tensor(&pred, cols)?)
        } else {
            (w.target, pred)
        };
        acc.push(&metrics_multi(&y, &p)?);
    }
    Ok(acc.finish()?)
}

/// One forecast row in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub timestamp: NaiveDateTime,
    pub truth: Vec<f64>,
    pub prediction: Vec<f64>,
}

/// `steps` consecutive forecast rows starting at the target block of window
/// `start`, stitched from back-to-back windows.
pub fn forecast_series(
    model: &Model,
    set: &WindowSet,
    scaler: &Scaler,
    start: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<ForecastRow>> {
    let l = set.spec().pred_len;
    let cols = set.output_columns();
    let needed = start + steps.div_ceil(l).saturating_sub(1) * l;
    if steps == 0 || needed >= set.len() {
        return Err(Error::Config(format!(
            "cannot forecast {steps} steps from window {start}: the split has {} windows",
            set.len()
        )));
    }
    let mut rows = Vec::with_capacity(steps);
    let mut i = start;
    while rows.len() < steps {
        let w = set.get(i)?;
        let pred = model.forecast(&w, &mut eval_rng(seed, w.start))?.values;
        let truth = scaler.inverse_tensor(&w.target, cols)?;
        let pred = scaler.inverse_tensor(&pred, cols)?;
        for (k, r) in set.target_rows(i).enumerate() {
            if rows.len() == steps {
                break;
            }
            rows.push(ForecastRow {
                timestamp: set.frame().timestamps()[r],
                truth: truth.row(k).to_vec(),
                prediction: pred.row(k).to_vec(),
            });
        }
        i += l;
    }
    Ok(rows)
}

/// `timestamp,truth,prediction` for one output column, otherwise
/// `timestamp,truth_<col>…,prediction_<col>…`.
pub fn write_forecast_csv(path: &Path, rows: &[ForecastRow], columns: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut header = vec!["timestamp".to_string()];
    if columns.len() == 1 {
        header.extend(["truth".to_string(), "prediction".to_string()]);
    } else {
        header.extend(columns.iter().map(|c| format!("truth_{c}")));
        header.extend(columns.iter().map(|c| format!("prediction_{c}")));
    }
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.timestamp.format(TIMESTAMP_FORMAT).to_string()];
        rec.extend(r.truth.iter().chain(&r.prediction).map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, checkpoint::encode(&model.params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, config: ModelConfig) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Model::from_params(config, checkpoint::decode(&bytes)?)?)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.hgnt";

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    config: &'a RunConfig,
    model: &'a ModelConfig,
    variant: &'static str,
    parameters: usize,
    scaler: &'a Scaler,
    windows: [usize; 3],
}

/// Outcome of [`run_train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: History,
    pub test: Metrics,
}

/// Trains, evaluates on the test split and writes `checkpoint.hgnt`,
/// `history.json`, `metrics.json` and `run.json` into `out`.
pub fn run_train(cfg: &RunConfig, prepared: &Prepared, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mc = prepared.model_config;
    let mut model = Model::new(mc, cfg.train.seed)?;
    let history = train(&mut model, &prepared.train, Some(&prepared.val), &cfg.train)?;
    let test = evaluate_split(
        &model,
        &prepared.test,
        &prepared.splits.scaler,
        cfg.eval.original_units,
        cfg.train.seed,
        cfg.eval.windows,
    )?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &model)?;
    write_json(&out.join("history.json"), &history)?;
    write_json(&out.join("metrics.json"), &test)?;
    write_json(
        &out.join("run.json"),
        &RunRecord {
            config: cfg,
            model: &mc,
            variant: mc.variant.name(),
            parameters: model.num_params(),
            scaler: &prepared.splits.scaler,
            windows: [prepared.train.len(), prepared.val.len(), prepared.test.len()],
        },
    )?;
    Ok(TrainOutcome { model, history, test })
}

/// Evaluates a checkpoint on the test split and writes `metrics.json`.
pub fn run_eval(cfg: &RunConfig, prepared: &Prepared, checkpoint: &Path, out: &Path) -> Result<Metrics> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let model = load_checkpoint(checkpoint, prepared.model_config)?;
    let m = evaluate_split(
        &model,
        &prepared.test,
        &prepared.splits.scaler,
        cfg.eval.original_units,
        cfg.train.seed,
        cfg.eval.windows,
    )?;
    write_json(&out.join("metrics.json"), &m)?;
    Ok(m)
}

/// Writes `forecast.csv` with `steps` test rows in original units.
pub fn run_predict(
    cfg: &RunConfig,
    prepared: &Prepared,
    checkpoint: &Path,
    out: &Path,
    start: usize,
    steps: usize,
) -> Result<Vec<ForecastRow>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let model = load_checkpoint(checkpoint, prepared.model_config)?;
    let rows = forecast_series(&model, &prepared.test, &prepared.splits.scaler, start, steps, cfg.train.seed)?;
    let names: Vec<String> = prepared
        .test
        .output_columns()
        .iter()
        .map(|&c| prepared.test.frame().columns()[c].clone())
        .collect();
    write_forecast_csv(&out.join("forecast.csv"), &rows, &names)?;
    Ok(rows)
}

/// Forecast of the scaled series, for callers that already hold a window.
pub fn forecast_scaled(model: &Model, w: &higenet_core::data::WindowSample, seed: u64) -> Result<Tensor> {
    Ok(model.forecast(w, &mut eval_rng(seed, w.start))?.values)
}
