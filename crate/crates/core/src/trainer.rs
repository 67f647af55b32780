//! Minibatch SGD fine-tuning with softmax cross-entropy.
//!
//! Batch norm layers run in inference mode during training: their running
//! statistics stay frozen and only `gamma`/`beta` are learned. Use
//! [`Model::recalibrate_batch_norm`] to refresh statistics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::mask::PruneMask;
use crate::net::{backprop, Model, Rule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    /// Re-zero masked parameters after every step.
    pub respect_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr_start: 0.01,
            lr_end: 0.001,
            batch_size: 32,
            seed: 0,
            momentum: 0.9,
            respect_masks: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_lr = (self.lr_start == 0.0 && self.lr_end == 0.0)
            || (self.lr_end > 0.0 && self.lr_start >= self.lr_end);
        if !ok_lr || !self.lr_start.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rates must satisfy lr_start >= lr_end > 0 (got {} -> {})",
                self.lr_start, self.lr_end
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate for `epoch`: geometric interpolation from `lr_start`
    /// (epoch 0) to `lr_end` (last epoch).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch == 0 || self.epochs <= 1 || self.lr_start == self.lr_end {
            return self.lr_start;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}

/// Gradients mirroring [`crate::net::Layer::params`] for every layer.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Vec<Tensor>>,
    pub loss: f64,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

fn check_labels(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<()> {
    if batch.batch() != labels.len() {
        return Err(shape_err(format!(
            "{} samples but {} labels",
            batch.batch(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.class_count) {
        return Err(shape_err(format!("label {l} outside [0, {})", model.class_count)));
    }
    Ok(())
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn softmax_xent(logits: &Tensor, labels: &[usize]) -> (f64, Vec<f64>) {
    let k = logits.item_len();
    let n = labels.len() as f64;
    let mut grad = Vec::with_capacity(logits.len());
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[y] as f64;
        for (j, e) in exps.iter().enumerate() {
            let p = e / z;
            grad.push((p - if j == y { 1.0 } else { 0.0 }) / n);
        }
    }
    (loss / n, grad)
}

pub fn loss(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(model, batch, labels)?;
    let logits = model.forward(batch)?;
    Ok(softmax_xent(&logits, labels).0)
}

/// Gradient of the mean cross-entropy loss.
pub fn grad(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<Gradients> {
    grad_scaled(model, batch, labels, 1.0)
}

/// Gradient of `scale * mean cross-entropy`.
pub fn grad_scaled(model: &Model, batch: &Tensor, labels: &[usize], scale: f64) -> Result<Gradients> {
    check_labels(model, batch, labels)?;
    let (_, record) = model.forward_recorded(batch)?;
    let (loss, mut seed) = softmax_xent(record.logits(), labels);
    seed.iter_mut().for_each(|g| *g *= scale);
    let bp = backprop(model, &record, seed, Rule::Gradient, false, true)?;
    let layers = model
        .layers
        .iter()
        .zip(bp.param_grads)
        .map(|(layer, grads)| {
            layer
                .params()
                .iter()
                .zip(grads)
                .map(|(p, g)| {
                    Tensor::new(p.shape().to_vec(), g.into_iter().map(|v| v as f32).collect())
                        .expect("gradient mirrors parameter")
                })
                .collect()
        })
        .collect();
    Ok(Gradients {
        layers,
        loss: loss * scale,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// SGD with momentum. Masked parameters are re-zeroed after every step when
/// `cfg.respect_masks` is set and a mask is given.
pub fn fine_tune(model: &Model, data: &Dataset, cfg: &TrainConfig, mask: Option<&PruneMask>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = model.clone();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            epoch_losses: Vec::new(),
        });
    }
    let mask = mask.filter(|_| cfg.respect_masks);
    let mut velocity: Vec<Vec<Vec<f64>>> = model
        .layers
        .iter()
        .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, model.clone());

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.images.select(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let g = grad(&model, &batch, &labels)?;
            total += g.loss;
            batches += 1;
            if !g.loss.is_finite() {
                break;
            }
            for ((layer, grads), vel) in model.layers.iter_mut().zip(&g.layers).zip(&mut velocity) {
                for ((p, gt), v) in layer.params_mut().into_iter().zip(grads).zip(vel) {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(gt.data()).zip(v.iter_mut()) {
                        *vi = cfg.momentum * *vi + gi as f64;
                        *w -= (lr * *vi) as f32;
                    }
                }
            }
            if model.check_finite().is_err() {
                break;
            }
            if let Some(m) = mask {
                m.apply(&mut model)?;
            }
        }
        let epoch_loss = total / batches as f64;
        if !epoch_loss.is_finite() || model.check_finite().is_err() {
            log::warn!("training diverged at epoch {epoch}");
            return Err(Error::TrainingDiverged {
                epoch,
                loss: epoch_loss,
                best: Box::new(best.1),
            });
        }
        if epoch_loss < best.0 {
            best = (epoch_loss, model.clone());
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome { model, epoch_losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes without examples.
    pub per_class_accuracy: Vec<Option<f64>>,
}

/// Predicted class per example (lowest index wins ties).
pub fn predict(model: &Model, images: &Tensor) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(images.batch());
    let n = images.batch();
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let logits = model.forward(&images.select(&idx))?;
        for row in logits.data().chunks(logits.item_len()) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict(model, &data.images)?;
    let mut correct = vec![0usize; data.class_count];
    let counts = data.class_counts();
    for (&p, &y) in preds.iter().zip(&data.labels) {
        if p == y {
            correct[y] += 1;
        }
    }
    let accuracy = correct.iter().sum::<usize>() as f64 / data.len() as f64;
    let per_class_accuracy = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    Ok(Evaluation {
        accuracy,
        per_class_accuracy,
    })
}
