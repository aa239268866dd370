//! Mini-batch training with early stopping on validation MSE.

use crate::data::Window;
use crate::error::{dim_err, Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::CrossformerModel;
use crate::nn::Graph;
use crate::optim::Adam;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Windows per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Caps the mini-batches drawn per epoch; each epoch then sees a fresh
    /// random subset of the training windows.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 20,
            patience: 5,
            seed: 42,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be positive".into()));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::Config("max_batches_per_epoch must be positive when set".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Validation MSE of the model before the first update.
    pub initial_val_mse: f64,
    pub stopped_early: bool,
}

/// Trains in place and leaves the best-validation parameters in `model`.
pub fn train(model: &mut CrossformerModel, train: &[Window], val: &[Window], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage(format!(
            "training needs windows in both splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    check_windows(model, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let initial = evaluate(model, val)?;
    let mut best = (0, initial.mse, model.params.clone());
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    tracing::info!(windows = train.len(), val_windows = val.len(), initial_val_mse = initial.mse, "training");

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if let Some(cap) = cfg.max_batches_per_epoch {
            batches.truncate(cap);
        }
        let (mut loss_sum, mut seen) = (0.0, 0);
        for batch in batches {
            let picked: Vec<&Window> = batch.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = loss_and_grads(model, &picked, rng.gen())?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {loss} in epoch {epoch}; lower the learning rate (now {}) or check the input scaling",
                    cfg.learning_rate
                )));
            }
            adam.step(&mut model.params, &grads)?;
            loss_sum += loss * picked.len() as f64;
            seen += picked.len();
        }
        let v = evaluate(model, val)?;
        if !v.mse.is_finite() {
            return Err(Error::Numerical(format!("validation MSE is {} after epoch {epoch}", v.mse)));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_mse: v.mse,
            val_mae: v.mae,
        };
        tracing::info!(epoch, train_loss = record.train_loss, val_mse = v.mse, "epoch done");
        history.push(record);
        if v.mse < best.1 {
            best = (epoch, v.mse, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        history,
        best_epoch: best.0,
        best_val_mse: best.1,
        initial_val_mse: initial.mse,
        stopped_early,
    })
}

/// Mean squared error over the `τ × D` horizon of a batch and the gradient of
/// every parameter, ordered like `model.params.ids()`.
pub fn loss_and_grads(model: &CrossformerModel, batch: &[&Window], dropout_seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let c = &model.config;
    let b = batch.len();
    let mut inputs = Vec::with_capacity(b * c.input_len * c.channels);
    let mut targets = Vec::with_capacity(b * c.horizon * c.channels);
    for w in batch {
        inputs.extend_from_slice(&w.input);
        targets.extend_from_slice(&w.target);
    }
    let mut g = Graph::training(&model.params, c.dropout, dropout_seed);
    let x = g.input(Tensor::new(vec![b, c.input_len, c.channels], inputs)?);
    let y = g.input(Tensor::new(vec![b, c.horizon, c.channels], targets)?);
    let pred = model.forward(&mut g, x)?;
    let loss = g.tape.mse(pred, y)?;
    let value = g.tape.value(loss).item();
    g.tape.backward(loss)?;
    Ok((value, g.param_grads()))
}

/// Forecast metrics over every window, in the units of the windows.
pub fn evaluate(model: &CrossformerModel, windows: &[Window]) -> Result<MetricsReport> {
    let preds = predict_windows(model, windows)?;
    let truth: Vec<f64> = windows.iter().flat_map(|w| w.target.iter().copied()).collect();
    metrics::report(&truth, &preds)
}

/// Stacked forecasts for each window, in order.
pub fn predict_windows(model: &CrossformerModel, windows: &[Window]) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::Usage("no windows to evaluate".into()));
    }
    check_windows(model, windows)?;
    let mut out = Vec::with_capacity(windows.len() * model.config.horizon * model.config.channels);
    for chunk in windows.chunks(EVAL_BATCH) {
        let batch: Vec<f64> = chunk.iter().flat_map(|w| w.input.iter().copied()).collect();
        out.extend(model.predict_batch(&batch)?);
    }
    Ok(out)
}

/// Holds each window's last input row flat over the horizon.
pub fn persistence_baseline(windows: &[Window], channels: usize) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Usage("no windows to evaluate".into()));
    }
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for w in windows {
        if channels == 0 || w.input.len() < channels || w.target.len() % channels != 0 {
            return Err(dim_err!("window does not hold whole rows of {channels} channels"));
        }
        let last = &w.input[w.input.len() - channels..];
        for row in w.target.chunks_exact(channels) {
            truth.extend_from_slice(row);
            pred.extend_from_slice(last);
        }
    }
    metrics::report(&truth, &pred)
}

fn check_windows(model: &CrossformerModel, windows: &[Window]) -> Result<()> {
    let c = &model.config;
    let (ni, nt) = (c.input_len * c.channels, c.horizon * c.channels);
    if let Some(w) = windows.iter().find(|w| w.input.len() != ni || w.target.len() != nt) {
        return Err(dim_err!(
            "window at row {} has {}+{} values; the model expects {}x{} input and {}x{} target",
            w.start,
            w.input.len(),
            w.target.len(),
            c.input_len,
            c.channels,
            c.horizon,
            c.channels
        ));
    }
    Ok(())
}
