//! Joint mini-batch training of all exits.
//!
//! Every step runs the forward pass over all exits, sums the weighted
//! per-exit cross-entropies on the ensemble logits and applies one momentum
//! SGD update to all parameters at once. Per-step metrics include the
//! valid-sample fractions, which track how much of the batch still carries
//! signal for each exit.

mod gradcheck;
mod loss;
mod optimizer;
mod valid;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{BackwardOptions, ModelState};

pub use gradcheck::{
    central_differences, check_gradients, finite_diff_gradient_check, numeric_exit_gradients, relative_error,
    GradCheckOptions, GradCheckReport,
};
pub use loss::{joint_loss, LossBreakdown};
pub use optimizer::{learning_rate_at, MomentumSgd};
pub use valid::{linear_quantile, valid_fraction, ValidSampleStats, VALID_QUANTILE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_milestones: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 300,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            decay_milestones: vec![150, 225],
            decay_factor: 0.1,
            weight_decay: 0.0,
            seed: 0,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::config("decay_factor must be > 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.decay_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay_milestones must be strictly increasing"));
        }
        if let Some(&m) = self.decay_milestones.iter().find(|&&m| m >= self.epochs) {
            return Err(Error::config(format!(
                "decay milestone {m} is not below epochs = {}",
                self.epochs
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        learning_rate_at(self.learning_rate, self.decay_factor, &self.decay_milestones, epoch)
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// One record of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub per_exit_loss: Vec<f64>,
    pub valid_fraction: Vec<f64>,
    pub total: f64,
    #[serde(skip)]
    pub valid_threshold: f64,
}

pub enum TrainEvent<'a> {
    Step(&'a StepMetrics),
    EpochEnd { epoch: usize, model: &'a ModelState },
}

pub struct TrainOutcome {
    pub model: ModelState,
    pub metrics: Vec<StepMetrics>,
}

/// Trains `model` on `data`, calling `on_event` after every step and epoch.
///
/// Deterministic in `config.seed`: the shuffle order is drawn from a seeded
/// stream, one fresh permutation per epoch.
pub fn train<F>(mut model: ModelState, data: &Dataset, config: &TrainingConfig, mut on_event: F) -> Result<TrainOutcome>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    config.validate()?;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            metrics: Vec::new(),
        });
    }
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if data.feature_dim() != model.input_len() {
        return Err(Error::shape(
            format!("input length {}", model.input_len()),
            data.feature_dim(),
        ));
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, model has {}",
            data.num_classes,
            model.num_classes()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = MomentumSgd::for_model(&model, config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs * config.steps_per_epoch(data.len()));
    let opts = BackwardOptions::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let xs: Vec<Vec<f64>> = idx.iter().map(|&i| data.features[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let pass = model.backward(&xs, &ys, &opts)?;
            let losses = pass.losses;
            if !losses.total.is_finite() || losses.per_exit_loss.iter().any(|l| !l.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    per_exit_loss: losses.per_exit_loss,
                });
            }
            let valid = valid_fraction(&losses.per_sample_losses)?;
            opt.step(&mut model, &pass.gradients, lr);
            let record = StepMetrics {
                step,
                epoch,
                lr,
                per_exit_loss: losses.per_exit_loss,
                valid_fraction: valid.per_exit_valid_fraction,
                total: losses.total,
                valid_threshold: valid.reference_threshold,
            };
            on_event(TrainEvent::Step(&record))?;
            metrics.push(record);
            step += 1;
        }
        on_event(TrainEvent::EpochEnd { epoch, model: &model })?;
    }
    Ok(TrainOutcome { model, metrics })
}

/// [`train`] without an event sink.
pub fn train_quiet(model: ModelState, data: &Dataset, config: &TrainingConfig) -> Result<TrainOutcome> {
    train(model, data, config, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_moons;
    use crate::model::{build_model, ModelConfig};

    fn small_cfg(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            epochs,
            batch_size: 16,
            decay_milestones: vec![],
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let model = build_model(&ModelConfig::mlp(2, &[4, 4], 2).unwrap(), 0).unwrap();
        let out = train_quiet(model.clone(), &two_moons(40, 0.1, 0), &small_cfg(0)).unwrap();
        assert_eq!(out.model, model);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn step_count_and_determinism() {
        let data = two_moons(50, 0.1, 0);
        let model = build_model(&ModelConfig::mlp(2, &[8, 8], 2).unwrap(), 1).unwrap();
        let a = train_quiet(model.clone(), &data, &small_cfg(3)).unwrap();
        let b = train_quiet(model, &data, &small_cfg(3)).unwrap();
        assert_eq!(a.metrics.len(), 3 * 4);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
        for m in &a.metrics {
            let recomputed: f64 = m.per_exit_loss.iter().sum();
            assert!((recomputed - m.total).abs() <= 1e-9 * m.total.abs());
        }
    }

    #[test]
    fn training_reduces_loss() {
        let data = two_moons(200, 0.1, 0);
        let model = build_model(&ModelConfig::mlp(2, &[16, 16], 2).unwrap(), 1).unwrap();
        let out = train_quiet(model, &data, &small_cfg(20)).unwrap();
        let first = out.metrics[..5].iter().map(|m| m.total).sum::<f64>();
        let last = out.metrics[out.metrics.len() - 5..]
            .iter()
            .map(|m| m.total)
            .sum::<f64>();
        assert!(last < first * 0.7, "{first} -> {last}");
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg(10);
        c.decay_milestones = vec![5, 10];
        assert!(c.validate().is_err());
        c.decay_milestones = vec![5, 5];
        assert!(c.validate().is_err());
        c.decay_milestones = vec![3, 7];
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn divergence_aborts_with_step() {
        let data = two_moons(64, 0.1, 0);
        let mut model = build_model(&ModelConfig::mlp(2, &[4], 2).unwrap(), 1).unwrap();
        model.params_mut()[2].data[0] = f64::NAN;
        let err = train_quiet(model, &data, &small_cfg(1)).err().unwrap();
        assert!(matches!(err, Error::Diverged { step: 0, .. }));
        assert!(err.is_numerical());
    }

    #[test]
    fn metrics_record_schema() {
        let m = StepMetrics {
            step: 3,
            epoch: 1,
            lr: 0.1,
            per_exit_loss: vec![0.5],
            valid_fraction: vec![0.9],
            total: 0.5,
            valid_threshold: 0.2,
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["epoch", "lr", "per_exit_loss", "step", "total", "valid_fraction"]
        );
    }
}
