//! SGD with classical momentum, reduce-on-plateau schedule, early stopping
//! and a finite-difference gradient checker.
//!
//! Batches are drawn from a seeded shuffle. Per-sample gradients are computed
//! in parallel but summed in batch order, so thread count never changes the
//! result.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch_net::mix_seed;
use crate::tensor::{ParamSet, Tensor};

/// Anything trainable by [`train`].
pub trait Model: Sync {
    type Input: Sync;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Loss of one sample and its gradient. `aug` seeds data augmentation;
    /// models without augmentation ignore it.
    fn loss_and_grad(&self, input: &Self::Input, label: usize, aug: Option<u64>) -> Result<(f64, ParamSet)>;
    fn predict(&self, input: &Self::Input) -> Result<usize>;
    /// Prediction and loss for one sample, without augmentation.
    fn evaluate(&self, input: &Self::Input, label: usize) -> Result<(usize, f64)> {
        Ok((self.predict(input)?, self.loss_and_grad(input, label, None)?.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub momentum: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    pub lr_min: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-2,
            momentum: 0.9,
            lr_factor: 0.7,
            plateau_patience: 5,
            lr_min: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor must be in (0, 1), got {}", self.lr_factor)));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_init) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr_init, got lr_min {} lr_init {}",
                self.lr_min, self.lr_init
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

/// One momentum step: `v = m*v + g; p -= lr*v`.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, velocity: &mut ParamSet, lr: f64, momentum: f64) -> Result<()> {
    params.check_layout(grads, "gradient")?;
    params.check_layout(velocity, "momentum buffer")?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    for ((_, p), ((_, g), (_, v))) in params.iter_mut().zip(grads.iter().zip(velocity.iter_mut())) {
        for ((pi, gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Learning rate for the next epoch. Counts epochs since the best validation
/// accuracy last improved, restarting the count whenever the rate dropped.
pub fn plateau_schedule(history: &[EpochRecord], cfg: &TrainConfig) -> f64 {
    let Some(last) = history.last() else {
        return cfg.lr_init;
    };
    let mut best = f64::NEG_INFINITY;
    let mut last_improvement = 0;
    for (i, e) in history.iter().enumerate() {
        if e.val_accuracy > best {
            best = e.val_accuracy;
            last_improvement = i;
        }
    }
    let stagnant = history[last_improvement + 1..].iter().filter(|e| e.lr == last.lr).count();
    if stagnant >= cfg.plateau_patience {
        (last.lr * cfg.lr_factor).max(cfg.lr_min)
    } else {
        last.lr
    }
}

/// Accuracy and mean loss over `set`.
pub fn evaluate_set<M: Model>(model: &M, set: &[(&M::Input, usize)]) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::precondition("evaluation over an empty set"));
    }
    let per = set
        .par_iter()
        .map(|(x, y)| model.evaluate(x, *y).map(|(p, l)| (usize::from(p == *y), l)))
        .collect::<Result<Vec<_>>>()?;
    let n = set.len() as f64;
    let hits: usize = per.iter().map(|r| r.0).sum();
    let loss: f64 = per.iter().map(|r| r.1).sum();
    Ok((hits as f64 / n, loss / n))
}

/// Fraction of `set` the model classifies correctly.
pub fn accuracy<M: Model>(model: &M, set: &[(&M::Input, usize)]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::precondition("accuracy over an empty set"));
    }
    let hits = set
        .par_iter()
        .map(|(x, y)| model.predict(x).map(|p| usize::from(p == *y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / set.len() as f64)
}

/// Mean loss and gradient over a batch, summed in batch order.
pub fn batch_loss_and_grad<M: Model>(model: &M, batch: &[(&M::Input, usize, Option<u64>)]) -> Result<(f64, ParamSet)> {
    let parts = batch
        .par_iter()
        .map(|(x, y, aug)| model.loss_and_grad(x, *y, *aug))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = model.params().zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.add_assign(g);
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// Trains in place. On return the model holds the parameters of the epoch
/// with the best validation accuracy.
pub fn train<M: Model>(
    model: &mut M,
    train_set: &[(&M::Input, usize)],
    val_set: &[(&M::Input, usize)],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::precondition("training set is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::precondition("validation set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = model.params().zeros_like();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        best_val_accuracy: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best_params = model.params().clone();
    let mut lr = cfg.lr_init;
    let mut since_best = 0;
    let mut best_val_loss = f64::INFINITY;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let epoch_seed = mix_seed(cfg.seed, epoch as u64);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&M::Input, usize, Option<u64>)> = chunk
                .iter()
                .map(|&i| (train_set[i].0, train_set[i].1, Some(mix_seed(epoch_seed, i as u64))))
                .collect();
            let (loss, grad) = batch_loss_and_grad(model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::TrainingAborted(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            sgd_step(model.params_mut(), &grad, &mut velocity, lr, cfg.momentum).map_err(|e| match e {
                Error::NonFinite(what) => Error::TrainingAborted(format!("epoch {epoch}, batch {bi}: non-finite {what}")),
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
        }
        let (val_accuracy, val_loss) = evaluate_set(model, val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
            val_loss,
            lr,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        history.epochs.push(record);
        // a small validation set saturates quickly; ties go to the lower loss
        let improved = val_accuracy > history.best_val_accuracy
            || (val_accuracy == history.best_val_accuracy && val_loss < best_val_loss);
        if improved {
            best_val_loss = val_loss;
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = epoch;
            best_params = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
        lr = plateau_schedule(&history.epochs, cfg);
    }
    *model.params_mut() = best_params;
    Ok(history)
}

/// Largest relative error between analytic and central-difference gradients
/// over at most `max_params` parameters drawn with `seed`.
pub fn grad_check<M: Model>(model: &mut M, input: &M::Input, label: usize, eps: f64, max_params: usize, seed: u64) -> Result<f64> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::precondition(format!("grad_check needs eps > 0, got {eps}")));
    }
    let (_, analytic) = model.loss_and_grad(input, label, None)?;
    let total = model.params().scalar_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, max_params.min(total)).into_vec();
    picks.sort_unstable();
    let mut worst: f64 = 0.0;
    for flat in picks {
        let (ti, off) = model.params().locate(flat).expect("index in range");
        let orig = model.params().tensor(ti).data[off];
        model.params_mut().tensor_mut(ti).data[off] = orig + eps;
        let up = model.loss_and_grad(input, label, None)?.0;
        model.params_mut().tensor_mut(ti).data[off] = orig - eps;
        let down = model.loss_and_grad(input, label, None)?.0;
        model.params_mut().tensor_mut(ti).data[off] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.tensor(ti).data[off];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyLoss {
    /// `0.5 * |Wx + b - onehot(y)|^2`
    Quadratic,
    CrossEntropy,
}

/// Affine classifier used to exercise the training machinery.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub classes: usize,
    pub dim: usize,
    pub loss: ToyLoss,
    params: ParamSet,
}

impl LinearModel {
    pub fn new(classes: usize, dim: usize, loss: ToyLoss) -> Self {
        let mut params = ParamSet::new();
        params.push("w", Tensor::zeros(&[classes, dim]));
        params.push("b", Tensor::zeros(&[classes]));
        LinearModel { classes, dim, loss, params }
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let w = &self.params.tensor(0).data;
        let b = &self.params.tensor(1).data;
        (0..self.classes)
            .map(|k| b[k] + w[k * self.dim..(k + 1) * self.dim].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }
}

impl Model for LinearModel {
    type Input = Vec<f64>;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_and_grad(&self, x: &Vec<f64>, label: usize, _aug: Option<u64>) -> Result<(f64, ParamSet)> {
        if x.len() != self.dim {
            return Err(Error::shape(format!("input of length {}, expected {}", x.len(), self.dim)));
        }
        if label >= self.classes {
            return Err(Error::precondition(format!("label {label} out of range")));
        }
        let s = self.scores(x);
        let (loss, ds): (f64, Vec<f64>) = match self.loss {
            ToyLoss::Quadratic => {
                let r: Vec<f64> = s.iter().enumerate().map(|(k, v)| v - f64::from(u8::from(k == label))).collect();
                (0.5 * r.iter().map(|v| v * v).sum::<f64>(), r)
            }
            ToyLoss::CrossEntropy => {
                let mut p = crate::tensor::softmax(&s);
                let l = -p[label].max(f64::MIN_POSITIVE).ln();
                p[label] -= 1.0;
                (l, p)
            }
        };
        let mut g = self.params.zeros_like();
        for k in 0..self.classes {
            for j in 0..self.dim {
                g.tensor_mut(0).data[k * self.dim + j] = ds[k] * x[j];
            }
            g.tensor_mut(1).data[k] = ds[k];
        }
        Ok((loss, g))
    }

    fn predict(&self, x: &Vec<f64>) -> Result<usize> {
        Ok(crate::patch_net::argmax(&self.scores(x)))
    }
}

/// Writes `history` as one JSON object per epoch.
pub fn write_history_jsonl(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in &history.epochs {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
