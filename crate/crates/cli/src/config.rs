//! Run configuration: a flat TOML file with a versioned schema. Unknown keys
//! are rejected so typos surface as config errors.

use std::path::{Path, PathBuf};

use boostnet::data::{self, Dataset};
use boostnet::model::{Backbone, ImageShape, ModelConfig};
use boostnet::trainer::{LossKind, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TwoMoons,
    GaussianBlobs,
    SmallImageGrid,
    ExternalDirectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Mlp,
    Cnn,
}

/// A scalar applied to every exit or one value per exit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerExit {
    All(f64),
    Each(Vec<f64>),
}

impl PerExit {
    fn expand(&self, n: usize, what: &str) -> Result<Vec<f64>, CliError> {
        match self {
            PerExit::All(v) => Ok(vec![*v; n]),
            PerExit::Each(v) if v.len() == n => Ok(v.clone()),
            PerExit::Each(v) => Err(CliError::Config(format!("{what}: {} values for {n} exits", v.len()))),
        }
    }
}

fn default_noise() -> f64 {
    0.2
}
fn default_holdout() -> f64 {
    0.2
}
fn default_test() -> f64 {
    0.2
}
fn default_one() -> PerExit {
    PerExit::All(1.0)
}
fn default_half() -> PerExit {
    PerExit::All(0.5)
}
fn default_true() -> bool {
    true
}
fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,

    pub dataset: DatasetKind,
    pub num_samples: Option<usize>,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub num_classes: Option<usize>,
    pub feature_dim: Option<usize>,
    pub dataset_path: Option<PathBuf>,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default = "default_test")]
    pub test_fraction: f64,

    pub backbone: BackboneKind,
    pub num_exits: usize,
    /// MLP hidden width or CNN channel count per block.
    pub widths: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub strides: Option<Vec<usize>>,
    #[serde(default = "default_half")]
    pub temperature: PerExit,
    #[serde(default = "default_one")]
    pub loss_weight: PerExit,
    #[serde(default = "default_true")]
    pub gradient_rescaling: bool,
    #[serde(default = "default_true")]
    pub stop_gradient: bool,
    #[serde(default)]
    pub independent_heads: bool,

    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "TrainingDefaults::lr")]
    pub learning_rate: f64,
    #[serde(default = "TrainingDefaults::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub decay_milestones: Vec<usize>,
    #[serde(default = "TrainingDefaults::decay")]
    pub decay_factor: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

struct TrainingDefaults;

impl TrainingDefaults {
    fn lr() -> f64 {
        TrainingConfig::default().learning_rate
    }
    fn momentum() -> f64 {
        TrainingConfig::default().momentum
    }
    fn decay() -> f64 {
        TrainingConfig::default().decay_factor
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
            return Err(CliError::Config(format!(
                "holdout_fraction {} not in (0, 0.5]",
                self.holdout_fraction
            )));
        }
        if self.dataset == DatasetKind::ExternalDirectory && self.dataset_path.is_none() {
            return Err(CliError::Config("external-directory needs dataset_path".into()));
        }
        if self.backbone == BackboneKind::Cnn && self.dataset != DatasetKind::SmallImageGrid {
            return Err(CliError::Config(
                "the cnn backbone needs image data (small-image-grid)".into(),
            ));
        }
        if let Some(0) = self.checkpoint_every {
            return Err(CliError::Config("checkpoint_every must be >= 1".into()));
        }
        self.training_config()?.validate()?;
        Ok(())
    }

    pub fn training_config(&self) -> Result<TrainingConfig, CliError> {
        Ok(TrainingConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            decay_milestones: self.decay_milestones.clone(),
            decay_factor: self.decay_factor,
            weight_decay: self.weight_decay,
            seed: self.seed,
            loss: LossKind::CrossEntropy,
        })
    }

    /// Model config for a dataset with the given feature layout.
    pub fn model_config(&self, data: &Dataset) -> Result<ModelConfig, CliError> {
        if self.widths.len() != self.num_exits {
            return Err(CliError::Config(format!(
                "widths has {} entries for num_exits = {}",
                self.widths.len(),
                self.num_exits
            )));
        }
        let backbone = match self.backbone {
            BackboneKind::Mlp => Backbone::Mlp {
                input_dim: data.feature_dim(),
                widths: self.widths.clone(),
            },
            BackboneKind::Cnn => {
                let input: ImageShape = data
                    .image_shape
                    .ok_or_else(|| CliError::Config("cnn backbone needs an image dataset".into()))?;
                Backbone::Cnn {
                    input,
                    channels: self.widths.clone(),
                    kernel_size: self.kernel_size,
                    strides: self.strides.clone().unwrap_or_else(|| vec![1; self.num_exits]),
                }
            }
        };
        let mut cfg = ModelConfig::with_backbone(backbone, data.num_classes)?;
        cfg.set_temperatures(&self.temperature.expand(self.num_exits, "temperature")?)?;
        cfg.set_loss_weights(&self.loss_weight.expand(self.num_exits, "loss_weight")?)?;
        cfg.gradient_rescaling = self.gradient_rescaling;
        cfg.stop_gradient = self.stop_gradient;
        cfg.independent_heads = self.independent_heads;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let n = self.num_samples.unwrap_or(1000);
        let ds = match self.dataset {
            DatasetKind::TwoMoons => data::two_moons(n, self.noise, self.seed),
            DatasetKind::GaussianBlobs => data::gaussian_blobs(
                n,
                self.num_classes.unwrap_or(3),
                self.feature_dim.unwrap_or(2),
                self.noise.max(1e-3) * 5.0,
                self.seed,
            )?,
            DatasetKind::SmallImageGrid => data::digit_grid(n, self.noise, self.seed),
            DatasetKind::ExternalDirectory => {
                let classes = self
                    .num_classes
                    .ok_or_else(|| CliError::Config("external-directory needs num_classes".into()))?;
                data::from_directory(self.dataset_path.as_ref().expect("validated"), classes)?
            }
        };
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
dataset = "two-moons"
num_samples = 200
backbone = "mlp"
num_exits = 2
widths = [8, 8]
epochs = 5
batch_size = 32
"#;

    #[test]
    fn minimal_config_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.learning_rate, 0.1);
        assert_eq!(cfg.momentum, 0.9);
        assert!(cfg.gradient_rescaling && cfg.stop_gradient);
        let data = cfg.load_dataset().unwrap();
        let m = cfg.model_config(&data).unwrap();
        assert_eq!(m.temperatures(), vec![0.5, 0.5]);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = format!("{MINIMAL}\nlearnig_rate = 0.3\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn milestone_past_end_is_error() {
        let text = format!("{MINIMAL}\ndecay_milestones = [5]\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn wrong_schema_version() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 2");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn per_exit_lists() {
        let text = format!("{MINIMAL}\ntemperature = [0.0, 1.0]\n");
        let cfg = RunConfig::from_toml(&text).unwrap();
        let m = cfg.model_config(&cfg.load_dataset().unwrap()).unwrap();
        assert_eq!(m.temperatures(), vec![0.0, 1.0]);
        let text = format!("{MINIMAL}\ntemperature = [0.0]\n");
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(cfg.model_config(&cfg.load_dataset().unwrap()).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn shipped_configs_load() {
        for text in [
            include_str!("../../../configs/moons.toml"),
            include_str!("../../../configs/digits_cnn.toml"),
        ] {
            let cfg = RunConfig::from_toml(text).unwrap();
            let data = cfg.load_dataset().unwrap();
            cfg.model_config(&data).unwrap();
        }
    }
}
