//! Adam with decoupled weight decay, step-decay schedule, the seeded training
//! loop and evaluation.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::ForwardCtx;
use crate::data::{metrics_multi, MetricMean, Metrics, WindowSet};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{forward_graph, Model};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// `θ ← θ − lr·wd·θ` before the Adam step; otherwise `wd·θ` is added to
    /// the gradient.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Evaluate on at most this many evenly spaced validation windows.
    pub val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 5e-4,
            decoupled_weight_decay: true,
            batch_size: 32,
            epochs: 20,
            decay_every: 5,
            decay_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            max_steps: None,
            val_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return Err(Error::invalid("batch_size, epochs and decay_every must be positive"));
        }
        if self.lr.is_nan() || self.lr < 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::invalid("lr and weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::invalid("Adam needs 0 ≤ β < 1 and ε > 0"));
        }
        Ok(())
    }
}

/// `lr₀ · factor^⌊epoch / every⌋`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = (epoch / cfg.decay_every) as i32;
    cfg.lr * libm::pow(cfg.decay_factor, k as f64)
}

/// First and second moment buffers in parameter-store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Adam {
            m: params.iter().map(|(_, t)| alloc::vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| alloc::vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64, cfg: &TrainConfig) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(cfg.beta1, t);
        let c2 = 1.0 - libm::pow(cfg.beta2, t);
        let wd = cfg.weight_decay;
        for (k, (_, p)) in params.iter_mut().enumerate() {
            let grad = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let mut g = grad[i];
                if cfg.decoupled_weight_decay {
                    *theta -= lr * wd * *theta;
                } else {
                    g += wd * *theta;
                }
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *theta -= lr * mh / (libm::sqrt(vh) + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub steps: usize,
    pub val: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
}

impl History {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }
}

/// Loss and gradients of one sample, accumulated onto `model.params`.
fn sample_step(model: &mut Model, sample: &crate::data::WindowSample, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx {
        training: true,
        dropout: model.config.dropout,
        rng,
    };
    let pred = forward_graph(&mut g, &model.params, &model.config, &mut ctx, sample)?;
    let target = g.constant(sample.target.clone());
    let loss = g.mse(pred, target)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, &mut model.params)?;
    Ok(value)
}

/// Trains in place. Windows are reshuffled every epoch from `cfg.seed`;
/// gradients are averaged over each batch. With a validation set the
/// parameters of the epoch with the lowest validation MSE are kept.
pub fn train(model: &mut Model, train_set: &WindowSet, val_set: Option<&WindowSet>, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    model.config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(&model.params);
    let mut history = History::default();
    let mut best: Option<ParamStore> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let budget = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 0..cfg.epochs {
        if history.steps() >= budget {
            break;
        }
        let lr = lr_schedule(cfg, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if history.steps() >= budget {
                break;
            }
            model.params.zero_grads();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let sample = train_set.get(i)?;
                batch_loss += sample_step(model, &sample, &mut noise_rng)?;
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch, lr });
            }
            model.params.scale_grads(1.0 / chunk.len() as f64);
            adam.step(&mut model.params, lr, cfg)?;
            history.step_losses.push(batch_loss);
            loss_sum += batch_loss;
            steps += 1;
        }
        let val = match val_set {
            Some(v) => Some(evaluate(model, v, cfg.seed, cfg.val_windows)?),
            None => None,
        };
        if let Some(m) = &val {
            if history.best_val_mse.is_none_or(|b| m.mse < b) {
                history.best_val_mse = Some(m.mse);
                history.best_epoch = Some(epoch);
                best = Some(model.params.clone());
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: if steps > 0 { loss_sum / steps as f64 } else { f64::NAN },
            steps,
            val,
        });
    }
    if let Some(p) = best {
        model.params = p;
    }
    model.params.zero_grads();
    Ok(history)
}

/// Evenly spaced window indices, at most `limit` of them.
pub fn eval_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k > 0 && k < len => (0..k).map(|j| j * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Mean of per-window metrics of the model's forecasts. ProbSparse key
/// sampling draws from a stream seeded by `seed`.
pub fn evaluate(model: &Model, set: &WindowSet, seed: u64, limit: Option<usize>) -> Result<Metrics> {
    evaluate_with(set, limit, |w| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ w.start as u64);
        Ok(model.forecast(w, &mut rng)?.values)
    })
}

/// Mean of per-window metrics for an arbitrary predictor.
pub fn evaluate_with<F>(set: &WindowSet, limit: Option<usize>, mut predict: F) -> Result<Metrics>
where
    F: FnMut(&crate::data::WindowSample) -> Result<Tensor>,
{
    if set.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let mut acc = MetricMean::default();
    for i in eval_indices(set.len(), limit) {
        let w = set.get(i)?;
        let p = predict(&w)?;
        acc.push(&metrics_multi(&w.target, &p)?);
    }
    acc.finish()
}

/// Forecast that repeats the last observed value of every output column.
pub fn repeat_last(sample: &crate::data::WindowSample, pred_len: usize) -> Result<Tensor> {
    let last = sample.enc_targets.row(sample.enc_targets.rows() - 1);
    let mut v = Vec::with_capacity(pred_len * last.len());
    for _ in 0..pred_len {
        v.extend_from_slice(last);
    }
    Tensor::new(&[pred_len, last.len()], v)
}

pub fn repeat_last_baseline(set: &WindowSet, limit: Option<usize>) -> Result<Metrics> {
    let l = set.spec().pred_len;
    evaluate_with(set, limit, |w| repeat_last(w, l))
}
