//! Mini-batch training with Adam, gradient clipping and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::layers::Layer;
use super::loss::{cross_entropy, Objective};
use super::model::Model;
use super::optim::{clip_grad_norm, zero_grad, Adam, AdamConfig};
use super::tensor::Tensor;
use crate::dataset::mix_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Kd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 64,
            max_epochs: 50,
            early_stop_patience: 10,
            grad_clip_norm: 1.0,
            seed: 0,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.grad_clip_norm > 0.0) {
            return Err(Error::Parameter("learning rate and clip norm must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::Parameter("batch size, epochs and patience must be positive".into()));
        }
        if self.early_stop_patience >= self.max_epochs {
            return Err(Error::Parameter(format!(
                "patience {} must be below max epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Validation-loss early stopping with min-delta 0.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad: 0,
        }
    }

    /// Records the loss for `epoch`; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad = 0;
            (true, false)
        } else {
            self.bad += 1;
            (false, self.bad >= self.patience)
        }
    }
}

/// Stacked inputs with labels and the trial ids they came from.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl TrainData {
    pub fn new(x: Tensor<f32>, labels: Vec<usize>, ids: Vec<String>) -> Self {
        assert_eq!(x.batch(), labels.len());
        assert_eq!(ids.len(), labels.len());
        Self { x, labels, ids }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean cross-entropy and top-1 accuracy in inference mode.
pub fn evaluate_loss(model: &Model, data: &TrainData, batch: usize) -> (f64, f64) {
    let k = model.spec.num_classes;
    let mut loss = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for rows in idx.chunks(batch.max(1)) {
        let logits = model.forward_eval(&data.x.gather(rows)).to_f64();
        for (z, &r) in logits.chunks(k).zip(rows) {
            loss += cross_entropy(z, data.labels[r]).0;
            if argmax(z) == data.labels[r] {
                correct += 1;
            }
        }
    }
    let n = data.len().max(1) as f64;
    (loss / n, correct as f64 / n)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place and leaves it holding the best-validation
/// weights, which are also returned as a checkpoint.
pub fn train(
    model: &mut Model,
    train_set: &TrainData,
    val_set: &TrainData,
    cfg: &TrainConfig,
    objective: &dyn Objective,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Argument("training and validation splits must be non-empty".into()));
    }
    let k = model.spec.num_classes;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5348));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x4452));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_state = model.state();
    let mut train_history = Vec::new();
    let mut val_history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.x.gather(rows);
            let labels: Vec<usize> = rows.iter().map(|&r| train_set.labels[r]).collect();
            let logits = model.net.forward_train(&x, &mut dropout_rng);
            let (loss, grad) = objective.batch(&logits.to_f64(), k, rows, &labels);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += loss * rows.len() as f64;
            zero_grad(&mut model.net);
            model.net.backward(&Tensor::from_f64(logits.shape.clone(), &grad));
            clip_grad_norm(&mut model.net, cfg.grad_clip_norm);
            adam.step(&mut model.net);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let (val_loss, val_acc) = evaluate_loss(model, val_set, cfg.batch_size);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        train_history.push(train_loss);
        val_history.push(val_loss);
        log::info!("epoch {epoch}: train loss {train_loss:.4}, val loss {val_loss:.4}, val acc {val_acc:.4}");
        let (improved, stop) = stopper.update(epoch, val_loss);
        if improved {
            best_state = model.state();
        }
        if stop {
            log::info!("early stop after epoch {epoch}, best epoch {}", stopper.best_epoch);
            break;
        }
    }
    model.load_state(&best_state)?;
    Ok(Checkpoint::new(
        model,
        cfg.clone(),
        stopper.best_epoch,
        train_history,
        val_history,
        train_set.ids.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_stops_at_epoch_eleven() {
        let mut s = EarlyStopping::new(10);
        let mut stopped = None;
        for epoch in 1..=50 {
            if s.update(epoch, epoch as f64).1 {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(11));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn config_rejects_patience_not_below_epochs() {
        let cfg = TrainConfig {
            max_epochs: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
