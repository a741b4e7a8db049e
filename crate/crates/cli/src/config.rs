//! Experiment configuration files. Every field is optional; command-line
//! flags override the file, which overrides the per-kind defaults.

use std::path::{Path, PathBuf};

use consac::data::{SynthHomographyConfig, SynthLineConfig};
use consac::refine::RefineConfig;
use consac::sampler::{SamplerConfig, WeightSourceKind};
use consac::training::{LossKind, TrainConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<String>,
    pub seed: Option<u64>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub refine: RefineSection,
    #[serde(default)]
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub instances: Option<usize>,
    pub single_samples: Option<usize>,
    pub multi_samples: Option<usize>,
    pub tau: Option<f64>,
    pub weight_source: Option<WeightSourceKind>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub loss: Option<LossKind>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub samples: Option<usize>,
    pub single_samples: Option<usize>,
    pub multi_samples: Option<usize>,
    pub instances: Option<usize>,
    pub tau: Option<f64>,
    pub kappa: Option<f64>,
    pub loss_clamp: Option<f64>,
    pub observations_per_scene: Option<usize>,
    pub channels: Option<usize>,
    pub blocks: Option<usize>,
    pub batch_norm: Option<bool>,
    pub augment: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSection {
    pub sigma: Option<f64>,
    pub em_iterations: Option<usize>,
    pub refit_iterations: Option<usize>,
    pub theta: Option<f64>,
    pub min_increment: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub lines: Option<SynthLineConfig>,
    pub homography: Option<SynthHomographyConfig>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn apply_sampler(&self, mut c: SamplerConfig) -> SamplerConfig {
        let s = &self.sampler;
        set(&mut c.instances, s.instances);
        set(&mut c.single_samples, s.single_samples);
        set(&mut c.multi_samples, s.multi_samples);
        set(&mut c.tau, s.tau);
        set(&mut c.weight_source, s.weight_source);
        set(&mut c.seed, self.seed);
        c
    }

    pub fn apply_train(&self, mut c: TrainConfig) -> TrainConfig {
        let t = &self.train;
        set(&mut c.loss, t.loss);
        set(&mut c.learning_rate, t.learning_rate);
        set(&mut c.batch_size, t.batch_size);
        set(&mut c.epochs, t.epochs);
        set(&mut c.samples, t.samples);
        set(&mut c.single_samples, t.single_samples);
        set(&mut c.multi_samples, t.multi_samples);
        set(&mut c.instances, t.instances);
        set(&mut c.tau, t.tau);
        set(&mut c.kappa, t.kappa);
        set(&mut c.loss_clamp, t.loss_clamp);
        set(&mut c.observations_per_scene, t.observations_per_scene);
        set(&mut c.channels, t.channels);
        set(&mut c.blocks, t.blocks);
        set(&mut c.batch_norm, t.batch_norm);
        set(&mut c.augment, t.augment);
        set(&mut c.seed, self.seed);
        c
    }

    pub fn apply_refine(&self, mut c: RefineConfig) -> RefineConfig {
        let r = &self.refine;
        set(&mut c.sigma, r.sigma);
        set(&mut c.em_iterations, r.em_iterations);
        set(&mut c.refit_iterations, r.refit_iterations);
        set(&mut c.theta, r.theta);
        set(&mut c.min_increment, r.min_increment);
        c
    }
}

/// Overwrites `slot` when `value` is present.
pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
