use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::data::{Dataset, NormStats};
use crate::layers::Mode;
use crate::metrics::{predict_dataset, ScorePredictor};
use crate::model::ModelState;
use crate::optim::{clip_grad_norm, mse_loss, AdamW, EarlyStopper, PlateauScheduler, StopDecision};
use crate::{global_l2_norm, Error, Model, ModelConfig, Result, Rng, Scalar, Tensor};

/// Stream labels for [`Rng::derive`].
pub(crate) const INIT_STREAM: u64 = 1;
pub(crate) const RUN_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

/// Points in the training loop reported to a [`TrainObserver`].
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    EpochStart { epoch: usize },
    Forward { batch: usize, size: usize },
    Loss { batch: usize, loss: f64 },
    ZeroGrad { batch: usize },
    Backward { batch: usize },
    Clip { batch: usize, norm: f64, scale: f64 },
    Step { batch: usize },
    Validation { epoch: usize, val_loss: f64 },
    Scheduler { epoch: usize, lr: f64 },
    Improved { epoch: usize },
    EarlyStop { epoch: usize },
    EpochEnd { record: EpochRecord },
}

pub trait TrainObserver {
    fn on_event(&mut self, event: &TrainEvent);
}

impl TrainObserver for () {
    fn on_event(&mut self, _: &TrainEvent) {}
}

impl TrainObserver for Vec<TrainEvent> {
    fn on_event(&mut self, event: &TrainEvent) {
        self.push(event.clone());
    }
}

impl<F: FnMut(&TrainEvent)> TrainObserver for F {
    fn on_event(&mut self, event: &TrainEvent) {
        self(event)
    }
}

/// Everything besides the model that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState<S> {
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Rng,
    pub optimizer: AdamW<S>,
    pub scheduler: PlateauScheduler,
    pub stopper: EarlyStopper<ModelState<S>>,
    pub history: Vec<EpochRecord>,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

pub struct Trainer<S> {
    pub model: Model<S>,
    pub config: TrainConfig,
    pub stats: NormStats,
    pub state: TrainState<S>,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh run: weights drawn from the seed's init stream.
    pub fn new(model_config: &ModelConfig, config: &TrainConfig, stats: &NormStats) -> Result<Self> {
        let model = Model::new(model_config, &mut Rng::derive(config.seed, &[INIT_STREAM]))?;
        Self::with_model(model, config, stats)
    }

    pub fn with_model(model: Model<S>, config: &TrainConfig, stats: &NormStats) -> Result<Self> {
        config.validate(model.config.input_size)?;
        stats.validate()?;
        let optimizer = AdamW::new(config.optimizer, &model.params())?;
        let mut scheduler = PlateauScheduler::new(config.optimizer.lr, config.scheduler_factor, config.scheduler_patience);
        scheduler.min_lr = config.min_lr;
        Ok(Trainer {
            model,
            config: config.clone(),
            stats: stats.clone(),
            state: TrainState {
                epoch: 0,
                rng: Rng::derive(config.seed, &[RUN_STREAM]),
                optimizer,
                scheduler,
                stopper: EarlyStopper::new(config.early_stop_patience),
                history: Vec::new(),
                stopped: false,
            },
        })
    }

    pub fn is_finished(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.config.epochs
    }

    /// One pass of the batch loop followed by validation, scheduling and the
    /// early-stopping check.
    pub fn run_epoch(
        &mut self,
        train: &Dataset<S>,
        val: &Dataset<S>,
        obs: &mut dyn TrainObserver,
    ) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        if val.is_empty() {
            return Err(Error::EmptyInput("validation set"));
        }
        let epoch = self.state.epoch;
        obs.on_event(&TrainEvent::EpochStart { epoch });
        let lr = self.state.optimizer.lr();
        self.model.set_mode(Mode::Train);
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.state.rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(self.config.batch_size).enumerate() {
            let images = match &self.config.augment {
                Some(aug) => train.augmented_batch(idx, aug, &self.stats, self.config.seed, epoch)?,
                None => train.batch_images(idx)?,
            };
            let targets = train.batch_targets(idx)?;
            obs.on_event(&TrainEvent::Forward { batch, size: idx.len() });
            let pred = self.model.forward(&images, &mut self.state.rng)?;
            let (loss, grad) = mse_loss(&pred, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            obs.on_event(&TrainEvent::Loss { batch, loss });
            self.model.zero_grad();
            obs.on_event(&TrainEvent::ZeroGrad { batch });
            self.model.backward(&grad)?;
            obs.on_event(&TrainEvent::Backward { batch });
            let mut params = self.model.params_mut();
            let (norm, scale) = {
                let mut grads: Vec<&mut Tensor<S>> = params.iter_mut().map(|p| &mut p.grad).collect();
                let norm = global_l2_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>())?;
                (norm, clip_grad_norm(&mut grads, self.config.clip_max_norm)?)
            };
            obs.on_event(&TrainEvent::Clip { batch, norm, scale });
            self.state.optimizer.step(&mut params)?;
            obs.on_event(&TrainEvent::Step { batch });
            loss_sum += loss * idx.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = evaluate_loss(&mut self.model, val, self.config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        obs.on_event(&TrainEvent::Validation { epoch, val_loss });
        let new_lr = self.state.scheduler.step(val_loss);
        self.state.optimizer.set_lr(new_lr);
        obs.on_event(&TrainEvent::Scheduler { epoch, lr: new_lr });
        let model = &self.model;
        let decision = self.state.stopper.update(val_loss, epoch, || model.snapshot());
        if self.state.stopper.best_epoch == Some(epoch) {
            obs.on_event(&TrainEvent::Improved { epoch });
        }
        let record = EpochRecord { epoch, train_loss, val_loss, lr };
        self.state.history.push(record);
        self.state.epoch += 1;
        if decision == StopDecision::Stop {
            self.state.stopped = true;
            obs.on_event(&TrainEvent::EarlyStop { epoch });
        }
        obs.on_event(&TrainEvent::EpochEnd { record });
        Ok(record)
    }

    /// Runs epochs until `until` epochs are complete, the configured budget is
    /// spent, or early stopping fires. Weights stay at their latest values.
    pub fn run_until(
        &mut self,
        train: &Dataset<S>,
        val: &Dataset<S>,
        until: usize,
        obs: &mut dyn TrainObserver,
    ) -> Result<()> {
        while !self.is_finished() && self.state.epoch < until {
            self.run_epoch(train, val, obs)?;
        }
        Ok(())
    }

    /// Loads the best-validation snapshot into the model.
    pub fn restore_best(&mut self) -> Result<TrainOutcome> {
        let best = self.state.stopper.best.as_ref().ok_or(Error::EmptyInput("training history"))?;
        self.model.restore(best)?;
        Ok(TrainOutcome {
            history: self.state.history.clone(),
            best_epoch: self.state.stopper.best_epoch.unwrap_or(0),
            best_val_loss: self.state.stopper.best_val_loss,
            stopped_early: self.state.stopped,
        })
    }

    pub fn fit(&mut self, train: &Dataset<S>, val: &Dataset<S>, obs: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        self.run_until(train, val, usize::MAX, obs)?;
        self.restore_best()
    }
}

/// Trains a fresh model and returns it with the best-validation weights.
pub fn train<S: Scalar>(
    model_config: &ModelConfig,
    train_set: &Dataset<S>,
    val_set: &Dataset<S>,
    stats: &NormStats,
    config: &TrainConfig,
) -> Result<(Model<S>, TrainOutcome)> {
    let mut trainer = Trainer::new(model_config, config, stats)?;
    let outcome = trainer.fit(train_set, val_set, &mut ())?;
    Ok((trainer.model, outcome))
}

/// Sample-weighted mean squared error between predictions and normalized
/// targets over the whole dataset.
pub fn prediction_mse<S: Scalar, P: ScorePredictor<S>>(
    predictor: &mut P,
    dataset: &Dataset<S>,
    batch_size: usize,
) -> Result<f64> {
    let preds = predict_dataset(predictor, dataset, batch_size)?;
    let sq: f64 = preds
        .iter()
        .zip(&dataset.samples)
        .map(|(p, s)| (p - s.score_norm) * (p - s.score_norm))
        .sum();
    Ok(sq / dataset.len() as f64)
}

/// [`prediction_mse`] in eval mode. The model's previous mode is restored.
pub fn evaluate_loss<S: Scalar>(model: &mut Model<S>, dataset: &Dataset<S>, batch_size: usize) -> Result<f64> {
    let prev = model.mode();
    model.set_mode(Mode::Eval);
    let result = prediction_mse(model, dataset, batch_size);
    model.set_mode(prev);
    result
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    out
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(history_csv(history).as_bytes()).map_err(|e| Error::file(path, e))
}
