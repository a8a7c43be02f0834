//! Cross-entropy training with Nesterov SGD, linear warmup and cosine
//! annealing, plus evaluation into softmax score matrices.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PreparedSet;
use crate::error::{Error, Result};
use crate::network::MsstModel;
use crate::params::ParameterStore;
use crate::tensor::{Tape, Tensor};

fn default_epochs() -> usize {
    120
}
fn default_warmup() -> usize {
    5
}
fn default_batch() -> usize {
    64
}
fn default_lr_max() -> f64 {
    0.1
}
fn default_lr_min() -> f64 {
    0.0001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay() -> f64 {
    0.0004
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            warmup_epochs: default_warmup(),
            batch_size: default_batch(),
            lr_max: default_lr_max(),
            lr_min: default_lr_min(),
            momentum: default_momentum(),
            weight_decay: default_decay(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup {} must be shorter than {} epochs",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return fail(format!("need 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail("momentum must be in [0, 1) and weight decay non-negative".into());
        }
        Ok(())
    }
}

/// Batch-mean cross-entropy of `[B, K]` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// Learning rate for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.lr_max * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let span = cfg.epochs - cfg.warmup_epochs - 1;
    if span == 0 {
        return Ok(cfg.lr_max);
    }
    let progress = (epoch - cfg.warmup_epochs) as f64 / span as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * progress).cos()))
}

/// Parameters exempt from weight decay: layer-norm gains and biases and
/// the fusion weights.
pub fn decays(name: &str) -> bool {
    !(name.contains(".ln1.") || name.contains(".ln2.") || name == "head.alpha")
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub velocity: Vec<Vec<f64>>,
    pub rng: ChaCha8Rng,
    pub best_val_acc: Option<f64>,
}

impl TrainState {
    pub fn new(params: &ParameterStore, seed: u64) -> Self {
        Self {
            epoch: 0,
            step: 0,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            best_val_acc: None,
        }
    }
}

/// One Nesterov step on every parameter, with `grads` in store order:
/// `g = grad + wd * p; v = m * v + g; p -= lr * (g + m * v)`.
pub fn sgd_step(
    params: &mut ParameterStore,
    grads: &[Vec<f64>],
    state: &mut TrainState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} velocities for {} parameters",
            grads.len(),
            state.velocity.len(),
            params.len()
        )));
    }
    for (i, ((name, p), v)) in params.iter_mut().zip(state.velocity.iter_mut()).enumerate() {
        let g = &grads[i];
        if g.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::Shape(format!(
                "gradient of {name} has {} entries, parameter has {}",
                g.len(),
                p.numel()
            )));
        }
        let wd = if decays(name) { weight_decay } else { 0.0 };
        for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            let g = gi + wd * *x;
            *vi = momentum * *vi + g;
            *x -= lr * (g + momentum * *vi);
        }
    }
    state.step += 1;
    Ok(())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    /// Parameters at the epoch with the highest validation accuracy (the
    /// last epoch when there is no validation set).
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub state: TrainState,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place. Each epoch shuffles the training set with the
/// state's generator, accumulates per-sample gradients in batch order and
/// averages them, then writes one JSON line of metrics to `log`.
/// Validation uses parameters rounded to `f32`, as a checkpoint stores them.
pub fn train(
    model: &mut MsstModel,
    train_set: &PreparedSet,
    val_set: Option<&PreparedSet>,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let classes = model.config().num_classes;
    for &l in train_set.labels.iter().chain(val_set.map_or(&[][..], |v| &v.labels[..])) {
        if l >= classes {
            return Err(Error::Label { label: l, classes });
        }
    }
    let mut state = TrainState::new(model.params(), cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = model.params().rounded_to_f32();
    let mut best_epoch = 0;
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut state.rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &i in batch {
                let at = |what: String| {
                    Error::NonFinite(format!(
                        "{what} at epoch {epoch}, step {}, sample {}",
                        state.step, train_set.ids[i]
                    ))
                };
                let out = match model.loss_and_gradients(&train_set.inputs[i], train_set.labels[i], true, &mut state.rng) {
                    Err(Error::NonFinite(what)) => return Err(at(what)),
                    other => other?,
                };
                if !out.loss.is_finite() {
                    return Err(at("training loss".into()));
                }
                loss_sum += out.loss;
                correct += (argmax(&out.logits) == train_set.labels[i]) as usize;
                for (p, g) in out.grads {
                    grads[p].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            sgd_step(model.params_mut(), &grads, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
        }
        let n = train_set.len() as f64;
        let val_acc = match val_set {
            Some(v) if !v.is_empty() => {
                let rounded = MsstModel::from_parts(model.config().clone(), model.params().rounded_to_f32());
                Some(evaluate(&rounded, v)?.accuracy)
            }
            _ => None,
        };
        let improved = match (val_acc, state.best_val_acc) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = model.params().rounded_to_f32();
            best_epoch = epoch;
            if val_acc.is_some() {
                state.best_val_acc = val_acc;
            }
        }
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
        };
        serde_json::to_writer(&mut *log, &m)?;
        log.write_all(b"\n").map_err(|e| Error::Data(format!("writing metrics: {e}")))?;
        metrics.push(m);
    }
    Ok(TrainReport {
        metrics,
        best,
        best_epoch,
        state,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// Softmax probabilities, one row per sample.
    pub scores: Vec<Vec<f64>>,
}

/// Deterministic inference with noise disabled.
pub fn evaluate(model: &MsstModel, set: &PreparedSet) -> Result<Evaluation> {
    let classes = model.config().num_classes;
    let mut scores = Vec::with_capacity(set.len());
    let mut predictions = Vec::with_capacity(set.len());
    let mut correct = 0;
    for (x, &label) in set.inputs.iter().zip(&set.labels) {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let logits = model.logits(x)?;
        let p = softmax(&logits);
        let pred = argmax(&p);
        correct += (pred == label) as usize;
        predictions.push(pred);
        scores.push(p);
    }
    let accuracy = if set.is_empty() { 0.0 } else { correct as f64 / set.len() as f64 };
    Ok(Evaluation {
        accuracy,
        predictions,
        scores,
    })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
