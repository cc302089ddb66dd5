use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerSpec, NetworkConfig};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::sharpen::{AdaptiveConfig, SchedulerConfig};
use crate::tensor::Padding;

pub const DENSE_PRESET: &str = "dense-512x2-10hot";
pub const CONV_PRESET: &str = "conv-small-10hot";
pub const PRESETS: [&str; 2] = [DENSE_PRESET, CONV_PRESET];

/// Reference topology for 28×28×1 inputs with an `n_hot` output code over
/// `classes` classes.
pub fn preset_network(name: &str, classes: usize, n_hot: usize) -> Result<NetworkConfig> {
    let out = LayerSpec::dense(classes * n_hot);
    let tail = [out, LayerSpec::SpikingBrelu, LayerSpec::SoftmaxDecode { classes }];
    let layers: Vec<LayerSpec> = match name {
        DENSE_PRESET => [
            LayerSpec::Flatten,
            LayerSpec::dense(512),
            LayerSpec::SpikingBrelu,
            LayerSpec::dense(512),
            LayerSpec::SpikingBrelu,
        ]
        .into_iter()
        .chain(tail)
        .collect(),
        CONV_PRESET => [
            LayerSpec::conv2d(16, 3, Padding::Valid),
            LayerSpec::batchnorm(),
            LayerSpec::SpikingBrelu,
            LayerSpec::maxpool(2),
            LayerSpec::conv2d(32, 3, Padding::Valid),
            LayerSpec::batchnorm(),
            LayerSpec::SpikingBrelu,
            LayerSpec::maxpool(2),
            LayerSpec::Flatten,
            LayerSpec::dense(256),
            LayerSpec::batchnorm(),
            LayerSpec::SpikingBrelu,
            LayerSpec::dense(128),
            LayerSpec::batchnorm(),
            LayerSpec::SpikingBrelu,
            LayerSpec::dense(64),
            LayerSpec::batchnorm(),
            LayerSpec::SpikingBrelu,
        ]
        .into_iter()
        .chain(tail)
        .collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?} (available: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(NetworkConfig {
        input_shape: vec![28, 28, 1],
        layers,
    })
}

/// Either a named preset or an explicit layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkChoice {
    Preset {
        preset: String,
        /// Output neurons per class; the preset's own default when unset.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_hot: Option<usize>,
    },
    Custom(NetworkConfig),
}

impl NetworkChoice {
    pub fn resolve(&self, classes: usize) -> Result<NetworkConfig> {
        match self {
            NetworkChoice::Preset { preset, n_hot } => preset_network(preset, classes, n_hot.unwrap_or(10)),
            NetworkChoice::Custom(c) => Ok(c.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Softmax cross-entropy over per-class sums of the output code.
    #[default]
    Softmax,
    /// Squared error between the output neurons and their n-hot targets.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding MNIST-layout IDX files.
    pub dir: PathBuf,
    /// Use only the first `train_limit` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

fn default_eval_batch() -> usize {
    1000
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// End training after the epoch in which the last layer reaches s = 1.
    /// No parameter receives gradient from then on.
    #[serde(default = "yes")]
    pub stop_when_sharpened: bool,
    pub data: DataConfig,
    pub network: NetworkChoice,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sharpener: SchedulerConfig,
}

impl ExperimentConfig {
    /// Training recipe shipped with each preset.
    pub fn for_preset(
        preset: &str,
        data_dir: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
        seed: u64,
    ) -> Result<Self> {
        let (epochs, optimizer) = match preset {
            DENSE_PRESET => (40, OptimizerConfig::new(OptimizerKind::Adadelta)),
            CONV_PRESET => (30, OptimizerConfig::new(OptimizerKind::Adadelta)),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (available: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            seed,
            epochs,
            batch_size: 128,
            output_dir: output_dir.into(),
            loss: LossKind::Softmax,
            eval_batch_size: default_eval_batch(),
            stop_when_sharpened: true,
            data: DataConfig {
                dir: data_dir.into(),
                train_limit: None,
                test_limit: None,
            },
            network: NetworkChoice::Preset {
                preset: preset.into(),
                n_hot: None,
            },
            optimizer,
            sharpener: SchedulerConfig::Adaptive(AdaptiveConfig::default()),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be ≥ 1".into()));
        }
        crate::optim::Optimizer::new(&self.optimizer)?;
        if let SchedulerConfig::Adaptive(a) = &self.sharpener {
            a.validate()?;
        }
        if let NetworkChoice::Preset { n_hot: Some(0), .. } = self.network {
            return Err(Error::Config("n_hot must be ≥ 1".into()));
        }
        Ok(())
    }
}
