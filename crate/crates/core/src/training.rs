//! Costs, output deltas, plain SGD and the epoch loop.
//!
//! The batch average `1/m` of the mini-batch update lives in the output delta,
//! so layer backward passes stay exact adjoints and `sgd_step` is simply
//! `p ← p − η·g`.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Pass;
use crate::mnist::Dataset;
use crate::model::Model;
use crate::tensor::{argmax, Tensor};

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Samples per eval-mode forward chunk.
const EVAL_CHUNK: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `(1/2N) Σ ‖y − a‖²`
    Quadratic,
    /// `−(1/N) Σ log p[true class]`, paired with a softmax output.
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Quadratic => "quadratic",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" | "mse" => Ok(LossKind::Quadratic),
            "cross_entropy" | "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(Error::domain(format!("unknown loss {other:?}"))),
        }
    }
}

fn same_shape(a: &Tensor, y: &Tensor, what: &str) -> Result<usize> {
    if a.shape() != y.shape() || a.rank() != 2 {
        return Err(Error::shape(format!(
            "{what}: outputs {:?} and targets {:?} must be equal [N, K]",
            a.shape(),
            y.shape()
        )));
    }
    Ok(a.shape()[0])
}

/// `C = (1/2N) Σ_x ‖y(x) − a(x)‖²`.
pub fn quadratic_cost(a: &Tensor, y: &Tensor) -> Result<f64> {
    let n = same_shape(a, y, "quadratic_cost")?;
    let sq: f64 = a.data().iter().zip(y.data()).map(|(a, y)| (y - a) * (y - a)).sum();
    Ok(sq / (2.0 * n as f64))
}

/// Mean negative log-probability of the target class.
pub fn cross_entropy_cost(p: &Tensor, y: &Tensor) -> Result<f64> {
    let n = same_shape(p, y, "cross_entropy_cost")?;
    let k = p.shape()[1];
    let total: f64 = p
        .data()
        .chunks(k)
        .zip(y.data().chunks(k))
        .map(|(pr, yr)| {
            pr.iter()
                .zip(yr)
                .filter(|(_, &t)| t != 0.0)
                .map(|(&pi, &t)| -t * pi.max(PROB_FLOOR).ln())
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

pub fn cost(kind: LossKind, a: &Tensor, y: &Tensor) -> Result<f64> {
    match kind {
        LossKind::Quadratic => quadratic_cost(a, y),
        LossKind::CrossEntropy => cross_entropy_cost(a, y),
    }
}

/// Output-layer delta, already divided by the batch size.
///
/// Both pairings reduce to `(a − y)/N`: for the quadratic cost it is the
/// gradient with respect to the network output `a` (any output activation's
/// derivative is applied by that layer's backward); for softmax with
/// cross-entropy it is the gradient with respect to the softmax logits.
pub fn output_delta(a: &Tensor, y: &Tensor, kind: LossKind) -> Result<Tensor> {
    let n = same_shape(a, y, "output_delta")?;
    let residual = a.sub(y)?;
    Ok(match kind {
        // dC/da
        LossKind::Quadratic => residual.scale(1.0 / n as f64),
        // dC/dz at the softmax input
        LossKind::CrossEntropy => residual.scale(1.0 / n as f64),
    })
}

/// Pure SGD update `p − η·g`.
pub fn sgd_step(param: &Tensor, grad: &Tensor, eta: f64) -> Result<Tensor> {
    param.zip_with(grad, "sgd_step", |p, g| p - eta * g)
}

/// In-place SGD over every parameter tensor of `model`.
pub fn apply_sgd(model: &mut Model, grads: &[Tensor], eta: f64) -> Result<()> {
    let params = model.params_mut();
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.into_iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= eta * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 100,
            eta: 0.1,
            loss: LossKind::CrossEntropy,
            seed: 1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be >= 1"));
        }
        // eta = 0 is allowed: it freezes the parameters, which tests rely on.
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::domain(format!("learning rate {} must be >= 0", self.eta)));
        }
        Ok(())
    }
}

/// Training-side figures of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStats {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

fn correct(outputs: &Tensor, labels: &[usize]) -> usize {
    let k = outputs.shape()[1];
    outputs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count()
}

/// One forward/backward/update step on a batch. Returns `(loss, correct)`.
pub fn train_batch(
    model: &mut Model,
    images: &Tensor,
    targets: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let out = model.forward(images, &mut Pass::Train(rng))?;
    let loss = cost(config.loss, &out, targets)?;
    let delta = output_delta(&out, targets, config.loss)?;
    let from_logits = config.loss == LossKind::CrossEntropy;
    if from_logits && !model.ends_in_softmax() {
        return Err(Error::domain("cross-entropy requires a softmax output layer"));
    }
    let grads = model.backward(&delta, from_logits)?;
    if config.eta != 0.0 {
        apply_sgd(model, &grads, config.eta)?;
    }
    Ok((loss, correct(&out, labels)))
}

/// One full-batch gradient-descent step over all of `data`. Returns the
/// loss before the update.
pub fn gd_step(model: &mut Model, data: &Dataset, loss: LossKind, eta: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let config = TrainConfig {
        batch_size: data.len().max(1),
        eta,
        loss,
        ..TrainConfig::default()
    };
    config.validate()?;
    let (value, _) = train_batch(model, data.images(), data.targets(), data.labels(), &config, rng)?;
    Ok(value)
}

/// One pass over `data` in (optionally shuffled) mini-batches.
///
/// Accuracy and loss are running averages over the batches as they are
/// trained, weighted by batch size.
pub fn train_epoch(model: &mut Model, data: &Dataset, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainStats> {
    config.validate()?;
    let plan = crate::mnist::batch_plan(data.len(), config.batch_size, config.shuffle.then_some(&mut *rng))?;
    let mut loss_sum = 0.0;
    let mut hits = 0;
    for (b, idx) in plan.iter().enumerate() {
        let batch = data.batch(idx)?;
        let (loss, ok) = train_batch(model, &batch.images, &batch.targets, &batch.labels, config, rng)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { batch: b, loss });
        }
        loss_sum += loss * idx.len() as f64;
        hits += ok;
    }
    Ok(TrainStats {
        accuracy: hits as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}

/// Eval-mode accuracy and loss over the whole dataset.
pub fn evaluate(model: &mut Model, data: &Dataset, loss: LossKind) -> Result<(f64, f64)> {
    let out = model.predict(data.images(), EVAL_CHUNK)?;
    let value = cost(loss, &out, data.targets())?;
    let accuracy = correct(&out, data.labels()) as f64 / data.len() as f64;
    Ok((accuracy, value))
}

/// Runs `config.epochs` epochs, evaluating on `validation` after each.
/// `on_epoch` sees every row as soon as it is complete.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let stats = train_epoch(model, train, config, rng)?;
        let (val_accuracy, val_loss) = evaluate(model, validation, config.loss)?;
        let row = EpochMetrics {
            epoch,
            train_accuracy: stats.accuracy,
            train_loss: stats.loss,
            val_accuracy,
            val_loss,
        };
        on_epoch(&row);
        history.push(row);
    }
    Ok(history)
}
