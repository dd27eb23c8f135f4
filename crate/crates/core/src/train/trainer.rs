//! The epoch loop: shuffled mini-batches, Adam, plateau decay, early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::model::SitModel;
use crate::ops::Mode;
use crate::rng::RngStream;

use super::adam::{adam_step, AdamState};
use super::config::TrainConfig;
use super::data::Dataset;
use super::loss::mse_loss;
use super::schedule::{EarlyStopState, SchedulerState, StopDecision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared error over the epoch's Train-mode forward passes.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch at which early stopping fired, if it did.
    pub stopped_epoch: Option<usize>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: SitModel,
    pub history: History,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Eval-mode predictions for the listed samples.
pub fn predict_indices(model: &SitModel, data: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    indices.iter().map(|&i| model.predict_features(&data.samples[i].features)).collect()
}

pub fn train(model: SitModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    mut model: SitModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train_idx, val_idx) = data.split(cfg.seed, cfg.val_fraction);
    let val_targets: Vec<f64> = val_idx.iter().map(|&i| data.samples[i].score).collect();

    let run = RngStream::new(cfg.seed).derive_named("train");
    let mut adam = AdamState::new(model.named_params().into_iter().map(|(_, t)| t.shape()));
    let mut scheduler = SchedulerState::new(cfg.lr, cfg.plateau_patience, cfg.plateau_factor);
    let mut stopper: EarlyStopState<SitModel> = EarlyStopState::new(cfg.early_stop_patience);
    let mut history = History::default();
    let mut lr = cfg.lr;
    let mut step = 0u64;

    for epoch in 1..=cfg.max_epochs {
        let mut order = train_idx.clone();
        run.derive_named("shuffle").derive(epoch as u64).shuffle(&mut order);
        let mut sq_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let n = batch.len() as f64;
            let mut grads = model.zero_grads();
            let mut batch_sq = 0.0;
            let step_rng = run.derive_named("dropout").derive(step);
            for (pos, &i) in batch.iter().enumerate() {
                let sample = &data.samples[i];
                let rng = step_rng.derive(pos as u64);
                let y = sample.score;
                let yhat = model.forward_backward(&sample.features, Mode::Train, &rng, |p| 2.0 * (p - y) / n, &mut grads)?;
                batch_sq += (yhat - y) * (yhat - y);
            }
            if !batch_sq.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergenceDetected { epoch, batch: b + 1, loss: batch_sq / n });
            }
            sq_sum += batch_sq;
            adam_step(&mut model.params_mut(), &grads, &mut adam, lr)?;
            step += 1;
        }
        let train_loss = sq_sum / order.len() as f64;
        let val_pred = predict_indices(&model, data, &val_idx)?;
        let val_loss = mse_loss(&val_targets, &val_pred)?;
        if !val_loss.is_finite() {
            return Err(Error::DivergenceDetected { epoch, batch: 0, loss: val_loss });
        }
        let record = EpochRecord { epoch, train_loss, val_loss, lr };
        on_epoch(&record);
        history.epochs.push(record);

        lr = scheduler.update(val_loss);
        if stopper.update(epoch, val_loss, &model) == StopDecision::Stop {
            history.stopped_epoch = Some(epoch);
            break;
        }
    }
    history.best_epoch = stopper.best_epoch;
    if let Some(best) = stopper.best_parameters.take() {
        model = best;
    }
    Ok(TrainOutcome { model, history, train_indices: train_idx, val_indices: val_idx })
}
