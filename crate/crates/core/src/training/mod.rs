//! Mini-batch Adam training with early stopping on validation accuracy,
//! and macro-averaged evaluation.
//!
//! Each sample gets its own graph. Per-sample gradients are summed in
//! sample order whatever the thread count, so a seeded run is bitwise
//! reproducible with or without parallel batches.

mod adam;
mod metrics;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError};
use crate::dataset::WindowSample;
use crate::model::{argmax, Model, ModelError};

pub use adam::{Adam, AdamConfig};
pub use metrics::{metrics_table, ClassMetrics, MetricsReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at epoch {epoch}, step {step}: {stats}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        stats: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Worker threads for per-sample work; 1 runs inline.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so a run can hold its weights fixed.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch == 0 || self.max_epochs == 0 || self.patience == 0 || self.threads == 0 {
            return bad("batch, max_epochs, patience and threads must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One window converted to model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub amp: Tensor,
    pub phase: Tensor,
    pub label: usize,
}

impl Example {
    pub fn from_window(w: &WindowSample) -> Self {
        Self {
            amp: Tensor::from_array2(&w.amplitude.view()),
            phase: Tensor::from_array2(&w.phase.view()),
            label: w.label,
        }
    }

    pub fn from_windows(ws: &[WindowSample]) -> Vec<Self> {
        ws.iter().map(Self::from_window).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the best validation epoch, rounded to `f32`.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// `epoch,train_loss,val_acc` with shortest round-trip float formatting.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_acc));
    }
    out
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

fn pool(threads: usize) -> Option<rayon::ThreadPool> {
    (threads > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

fn map_ordered<T: Send, F>(pool: Option<&rayon::ThreadPool>, n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    match pool {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}

struct SampleGrad {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

fn sample_grad(model: &Model, ex: &Example, dropout_seed: u64) -> Result<SampleGrad, TrainError> {
    let mut g = Graph::training(dropout_seed);
    let logits = model.forward(&mut g, &ex.amp, &ex.phase)?;
    let loss = g.cross_entropy(logits, &[ex.label])?;
    g.backward(loss)?;
    Ok(SampleGrad {
        loss: g.value(loss).item().unwrap_or(f64::NAN),
        grads: g.collect_param_grads(model.params()),
    })
}

/// Eval-mode predictions in input order.
pub fn predict_all(model: &Model, examples: &[Example], threads: usize) -> Result<Vec<usize>, TrainError> {
    let pool = pool(threads);
    map_ordered(pool.as_ref(), examples.len(), |i| {
        model
            .logits(&examples[i].amp, &examples[i].phase)
            .map(|l| argmax(&l))
    })
    .into_iter()
    .map(|r| r.map_err(TrainError::from))
    .collect()
}

pub fn evaluate(model: &Model, examples: &[Example], threads: usize) -> Result<MetricsReport, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let preds = predict_all(model, examples, threads)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(MetricsReport::from_predictions(&labels, &preds, model.config().classes))
}

fn accuracy(model: &Model, examples: &[Example], pool: Option<&rayon::ThreadPool>) -> Result<f64, TrainError> {
    let correct = map_ordered(pool, examples.len(), |i| {
        model
            .logits(&examples[i].amp, &examples[i].phase)
            .map(|l| usize::from(argmax(&l) == examples[i].label))
    })
    .into_iter()
    .sum::<Result<usize, ModelError>>()?;
    Ok(correct as f64 / examples.len() as f64)
}

/// Trains `model` and returns the best-validation snapshot.
///
/// Stops after `patience` epochs without a strict improvement in validation
/// accuracy, so ties keep the earlier epoch.
pub fn train(mut model: Model, train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let pool = pool(cfg.threads);
    let mut adam = Adam::new(model.params(), cfg.adam());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[0x5348_5546]));
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            let results = map_ordered(pool.as_ref(), batch.len(), |j| {
                let seed = mix(cfg.seed, &[epoch as u64, step as u64, j as u64]);
                sample_grad(&model, &train[batch[j]], seed)
            });
            let store = model.params_mut();
            store.zero_grad();
            let mut batch_loss = 0.0;
            for r in results {
                let r = r?;
                batch_loss += r.loss;
                store.accumulate(&r.grads);
            }
            if !batch_loss.is_finite() {
                let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    stats: format!("batch size {}, loss sum {batch_loss}, labels {labels:?}", batch.len()),
                });
            }
            let inv = 1.0 / batch.len() as f64;
            for p in store.iter_mut() {
                p.grad.iter_mut().for_each(|g| *g *= inv);
            }
            adam.step(store)?;
            loss_sum += batch_loss;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_acc = accuracy(&model, val, pool.as_ref())?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
        log::info!("epoch {epoch}: train_loss {train_loss:.6} val_acc {val_acc:.4}");

        let improved = best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc);
        if improved {
            let mut snapshot = model.clone();
            snapshot.round_to_f32();
            best = Some((epoch, val_acc, snapshot));
        } else if epoch - best.as_ref().map_or(0, |b| b.0) >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let epochs_run = history.len();
    let (best_epoch, best_val_acc, model) = best.expect("at least one epoch ran");
    log::info!("best epoch {best_epoch} (val_acc {best_val_acc:.4}), {epochs_run} epochs run");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_acc,
        epochs_run,
        stopped_early,
    })
}
