//! Minibatch SGD plumbing shared by every classifier the engine trains.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::matrix::Matrix;
use crate::nn::MlpClassifier;
use crate::rng::Rng;

/// Epoch count, batch size and a step-decayed learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of the epoch budget at which the rate is multiplied by
    /// `decay_factor`.
    #[serde(default)]
    pub decay_at: Vec<f64>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
}

fn default_decay() -> f64 {
    0.1
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 0.1,
            decay_at: Vec::new(),
            decay_factor: 0.1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(input_err!("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(input_err!("lr must be positive, got {}", self.lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(input_err!("decay_factor must be positive"));
        }
        if let Some(f) = self.decay_at.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(input_err!("decay_at fraction {f} is outside [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based) out of `total` epochs.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let decays = self
            .decay_at
            .iter()
            .filter(|&&f| epoch >= (f * total as f64).floor() as usize)
            .count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

/// Inputs with their target output positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub x: Matrix,
    pub targets: Vec<usize>,
}

impl TrainSet {
    pub fn new(x: Matrix, targets: Vec<usize>) -> Result<Self> {
        if x.rows() != targets.len() {
            return Err(input_err!(
                "{} rows but {} targets",
                x.rows(),
                targets.len()
            ));
        }
        Ok(Self { x, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Batch handed to the loss callback.
pub struct Batch<'a> {
    pub x: &'a Matrix,
    pub targets: &'a [usize],
    pub logits: &'a Matrix,
}

pub fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Per-epoch index set in which every target contributes exactly the size of
/// the smallest target group, drawn without replacement.
pub fn balanced_epoch_indices(targets: &[usize], rng: &mut Rng) -> Vec<usize> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in targets.iter().enumerate() {
        groups.entry(t).or_default().push(i);
    }
    let floor = groups.values().map(Vec::len).min().unwrap_or(0);
    let mut picked = Vec::with_capacity(floor * groups.len());
    for members in groups.values_mut() {
        members.shuffle(rng);
        picked.extend_from_slice(&members[..floor]);
    }
    picked.shuffle(rng);
    picked
}

/// One pass over `order` in minibatches. `loss` returns the batch loss and
/// its gradient w.r.t. the logits. Returns the per-batch losses.
pub fn run_epoch<F>(
    model: &mut MlpClassifier,
    set: &TrainSet,
    order: &[usize],
    batch_size: usize,
    lr: f64,
    mut loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&Batch<'_>) -> Result<(f64, Matrix)>,
{
    let mut losses = Vec::with_capacity(order.len().div_ceil(batch_size.max(1)));
    for (b, rows) in order.chunks(batch_size).enumerate() {
        let x = set.x.select_rows(rows);
        let targets: Vec<usize> = rows.iter().map(|&r| set.targets[r]).collect();
        let (logits, trace) = model.forward(&x)?;
        let (value, grad) = loss(&Batch {
            x: &x,
            targets: &targets,
            logits: &logits,
        })?;
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {value} at batch {b} (lr {lr}, {} rows)",
                rows.len()
            )));
        }
        let grads = model.backward(&trace, &grad)?;
        model.sgd_step(&grads, lr)?;
        losses.push(value);
    }
    Ok(losses)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
