//! Minibatch Adam training with a plateau-halving learning-rate schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{AdamState, ConditionedMlp};
use crate::scorer::{ScorerConfig, ScorerParameters};
use crate::toy::{ToyModeSet, ToySample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    /// Epochs without validation improvement before the learning rate halves.
    pub patience: usize,
    /// Training stops after this many halvings.
    pub max_halvings: usize,
    pub max_epochs: usize,
    pub validation_samples: usize,
    pub validation_seed: u64,
    /// Seeds initialization and the training stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-9,
            batch_size: 128,
            samples_per_epoch: 40_000,
            patience: 5,
            max_halvings: 8,
            max_epochs: 200,
            validation_samples: 4096,
            validation_seed: 0x5eed_0f_7a11,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("samples_per_epoch", self.samples_per_epoch),
            ("max_epochs", self.max_epochs),
            ("validation_samples", self.validation_samples),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Halvings,
    EpochCap,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub halvings: usize,
    pub stop_reason: StopReason,
}

/// A model the generic loop can optimize.
pub trait Objective {
    fn network(&self) -> &ConditionedMlp;
    fn network_mut(&mut self) -> &mut ConditionedMlp;
    /// Mean minibatch loss and its gradient. `rng` feeds any stochastic
    /// part of the objective, such as negative sampling.
    fn batch_loss_and_grad(&self, batch: &[ToySample], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)>;
    /// Deterministic mean loss over a held-out set.
    fn validation_loss(&self, samples: &[ToySample]) -> Result<f64>;
}

impl Objective for ScorerParameters {
    fn network(&self) -> &ConditionedMlp {
        ScorerParameters::network(self)
    }

    fn network_mut(&mut self) -> &mut ConditionedMlp {
        ScorerParameters::network_mut(self)
    }

    fn batch_loss_and_grad(&self, batch: &[ToySample], _rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        self.loss_and_grad(batch)
    }

    fn validation_loss(&self, samples: &[ToySample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(invalid("empty validation set"));
        }
        let w = 1.0 / samples.len() as f64;
        let weighted: Vec<_> = samples.iter().map(|s| (*s, w)).collect();
        self.weighted_loss(&weighted)
    }
}

/// Optional early exit once the validation loss reaches a value.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainHooks {
    pub target_validation_loss: Option<f64>,
}

/// Runs the loop and leaves the best-validation parameters in `model`.
pub fn train_objective<M, I>(
    model: &mut M,
    stream: &mut I,
    validation: &[ToySample],
    config: &TrainConfig,
    hooks: TrainHooks,
) -> Result<TrainingLog>
where
    M: Objective,
    I: Iterator<Item = ToySample>,
{
    config.validate()?;
    let count = model.network().params().len();
    let mut adam = AdamState::new(count, config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let mut objective_rng = ChaCha8Rng::seed_from_u64(config.seed);
    objective_rng.set_stream(2);

    let mut best_params = model.network().params().to_vec();
    let mut best = model.validation_loss(validation)?;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut halvings = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::EpochCap;
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.max_epochs {
        let mut remaining = config.samples_per_epoch;
        let mut total = 0.0;
        let mut seen = 0usize;
        for b in 0..config.batches_per_epoch() {
            let size = remaining.min(config.batch_size);
            remaining -= size;
            batch.clear();
            batch.extend(stream.by_ref().take(size));
            if batch.is_empty() {
                return Err(invalid("training stream ended early"));
            }
            let (loss, grad) = model.batch_loss_and_grad(&batch, &mut objective_rng)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { loss, epoch, batch: b });
            }
            adam.update(model.network_mut().params_mut(), &grad);
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        let validation_loss = model.validation_loss(validation)?;
        let train_loss = total / seen as f64;
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {validation_loss:.5} lr {:.2e}",
            adam.learning_rate
        );
        epochs.push(EpochRecord {
            epoch,
            learning_rate: adam.learning_rate,
            train_loss,
            validation_loss,
        });
        if validation_loss < best {
            best = validation_loss;
            best_epoch = epoch;
            best_params.copy_from_slice(model.network().params());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                since_best = 0;
                halvings += 1;
                adam.learning_rate *= 0.5;
                if halvings >= config.max_halvings {
                    stop_reason = StopReason::Halvings;
                    break;
                }
            }
        }
        if hooks.target_validation_loss.is_some_and(|t| best <= t) {
            stop_reason = StopReason::Target;
            break;
        }
    }
    model.network_mut().params_mut().copy_from_slice(&best_params);
    Ok(TrainingLog {
        epochs,
        best_epoch,
        best_validation_loss: best,
        halvings,
        stop_reason,
    })
}

/// Fixed held-out draws from the toy process.
pub fn validation_set(mode_set: &ToyModeSet, config: &TrainConfig) -> Vec<ToySample> {
    mode_set
        .sample_stream(ChaCha8Rng::seed_from_u64(config.validation_seed))
        .take(config.validation_samples)
        .collect()
}

/// Trains a fresh scorer on the toy process.
pub fn train(
    scorer: ScorerConfig,
    mode_set: &ToyModeSet,
    config: &TrainConfig,
    hooks: TrainHooks,
) -> Result<(ScorerParameters, TrainingLog)> {
    let mut params = ScorerParameters::new(scorer, config.seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(1);
    let mut stream = mode_set.sample_stream(data_rng);
    let validation = validation_set(mode_set, config);
    let log = train_objective(&mut params, &mut stream, &validation, config, hooks)?;
    Ok((params, log))
}
