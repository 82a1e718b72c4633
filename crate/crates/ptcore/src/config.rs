//! Experiment configuration: a single TOML file describing model, dataset,
//! noise, sampling densities, and per-stage hyperparameters. Command-line
//! flags override file values; a run is reproducible from (config, seed).

use crate::dataset::{self, DatasetHandle};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Shape};
use crate::noise::NoiseConfig;
use crate::sparse::SamplingPlan;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// IDX files (MNIST-family) under `dir`.
    Idx {
        dir: PathBuf,
        #[serde(default = "default_mean")]
        mean: f64,
        #[serde(default = "default_std")]
        std: f64,
        limit_train: Option<usize>,
        limit_test: Option<usize>,
    },
    /// Synthetic Gaussian blobs (vector task).
    Blobs {
        #[serde(default = "default_features")]
        features: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
    /// Procedural digit images (MNIST-class stand-in, labeled synthetic in
    /// all outputs).
    SyntheticDigits {
        #[serde(default = "default_classes10")]
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_side")]
        side: usize,
    },
}

fn default_mean() -> f64 {
    0.1307
}
fn default_std() -> f64 {
    0.3081
}
fn default_features() -> usize {
    8
}
fn default_classes() -> usize {
    4
}
fn default_classes10() -> usize {
    10
}
fn default_per_class() -> usize {
    128
}
fn default_test_per_class() -> usize {
    32
}
fn default_side() -> usize {
    28
}

impl DatasetConfig {
    pub fn load(&self, seed: u64) -> Result<DatasetHandle> {
        match self {
            DatasetConfig::Idx {
                dir,
                mean,
                std,
                limit_train,
                limit_test,
            } => dataset::load_idx_dataset(dir, *mean, *std, *limit_train, *limit_test),
            DatasetConfig::Blobs {
                features,
                classes,
                train_per_class,
                test_per_class,
            } => Ok(dataset::synthetic_blobs(
                *features,
                *classes,
                *train_per_class,
                *test_per_class,
                seed,
            )),
            DatasetConfig::SyntheticDigits {
                classes,
                train_per_class,
                test_per_class,
                side,
            } => Ok(dataset::synthetic_digits(
                *classes,
                *train_per_class,
                *test_per_class,
                *side,
                seed,
            )),
        }
    }
}

/// Model architecture: input shape plus the layer chain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// Small MLP (8-16-16-4) on vector inputs.
    pub fn mlp_small(photonic: bool) -> Self {
        Self {
            input: Shape::Vector(8),
            layers: vec![
                LayerSpec::Linear {
                    in_features: 8,
                    out_features: 16,
                    photonic,
                    bias: false,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: 16,
                    out_features: 16,
                    photonic,
                    bias: false,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: 16,
                    out_features: 4,
                    photonic,
                    bias: false,
                },
            ],
        }
    }

    /// CNN-S: CONV8K3S2 - CONV6K3S2 - FC10 on 28×28 single-channel images.
    pub fn cnn_s(photonic: bool) -> Self {
        Self {
            input: Shape::Image(1, 28, 28),
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 8,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    photonic,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: 8,
                    out_channels: 6,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    photonic,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 6 * 7 * 7,
                    out_features: 10,
                    photonic,
                    bias: true,
                },
            ],
        }
    }

    pub fn preset(name: &str, photonic: bool) -> Result<Self> {
        match name {
            "mlp-small" => Ok(Self::mlp_small(photonic)),
            "cnn-s" => Ok(Self::cnn_s(photonic)),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }
}

/// Offline pre-training of the electronic twin (source weights for mapping).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 15,
            lr: 0.002,
            weight_decay: 0.01,
        }
    }
}

/// Identity-calibration stage settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IcStageConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub init_step: f64,
    pub decay: f64,
}

impl Default for IcStageConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 400,
            init_step: 0.1,
            decay: 0.99,
        }
    }
}

/// Parallel-mapping stage settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MapStageConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub init_step: f64,
    pub decay: f64,
    pub osp_noisy_passes: bool,
}

impl Default for MapStageConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 300,
            init_step: 0.1,
            decay: 0.99,
            osp_noisy_passes: true,
        }
    }
}

/// Subspace-learning stage settings. From-scratch runs default to
/// lr 0.002 / 100 epochs; post-mapping adaptation to lr 0.0002 / 20 epochs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SlStageConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl SlStageConfig {
    pub fn from_scratch() -> Self {
        Self {
            enabled: true,
            epochs: 100,
            lr: 0.002,
            lr_min: 0.0,
            weight_decay: 0.01,
            batch_size: 32,
        }
    }

    pub fn after_mapping() -> Self {
        Self {
            enabled: true,
            epochs: 20,
            lr: 0.0002,
            lr_min: 0.0,
            weight_decay: 0.01,
            batch_size: 32,
        }
    }
}

impl Default for SlStageConfig {
    fn default() -> Self {
        Self::after_mapping()
    }
}

/// The whole experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    pub noise: NoiseConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub sampling: SamplingPlan,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub ic: IcStageConfig,
    #[serde(default)]
    pub map: MapStageConfig,
    #[serde(default)]
    pub train: SlStageConfig,
}

fn default_workers() -> usize {
    1
}
fn default_k() -> usize {
    9
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.sampling.validate()?;
        if !(2..=32).contains(&self.k) {
            return Err(Error::Config(format!(
                "k must lie in [2, 32], got {}",
                self.k
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        crate::nn::validate_chain(&self.model.layers, self.model.input)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// A ready-to-run smoke configuration: small MLP on blobs.
    pub fn example() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/example"),
            workers: 1,
            k: 9,
            noise: NoiseConfig::default(),
            dataset: DatasetConfig::Blobs {
                features: 8,
                classes: 4,
                train_per_class: 128,
                test_per_class: 32,
            },
            model: ModelConfig::mlp_small(true),
            sampling: SamplingPlan::dense(),
            pretrain: PretrainConfig::default(),
            ic: IcStageConfig::default(),
            map: MapStageConfig::default(),
            train: SlStageConfig::after_mapping(),
        }
    }
}
