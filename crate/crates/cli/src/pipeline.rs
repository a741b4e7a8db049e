//! Sampling method dispatch and the per-scene fit shared by `fit`, `eval`,
//! `sweep` and the acceptance experiments.

use clap::ValueEnum;
use consac::eval::assign_labels;
use consac::refine::{postprocess, RefineConfig};
use consac::sampler::{run_consac, sequential_ransac_best_of, SamplerConfig, SearchStep, Uniform, UniformWithRemoval};
use consac::{ConsacError, ModelInstance, MultiHypothesis, Network, NetworkSampler, Result, Scene};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Learned, state-conditioned sampling weights.
    Consac,
    /// The learned network fed an all-zero state.
    Unconditional,
    /// Uniform weights in the conditional loops.
    Uniform,
    /// Uniform over observations that are not yet inliers.
    UniformWithRemoval,
    /// Best-of-P sequential RANSAC.
    SeqRansac,
}

impl Method {
    pub fn needs_network(self) -> bool {
        matches!(self, Method::Consac | Method::Unconditional)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Consac => "consac",
            Method::Unconditional => "unconditional",
            Method::Uniform => "uniform",
            Method::UniformWithRemoval => "uniform-with-removal",
            Method::SeqRansac => "seq-ransac",
        }
    }
}

/// Raw multi-hypothesis from one sampling method.
pub fn sample(
    scene: &Scene,
    method: Method,
    network: Option<&Network>,
    config: &SamplerConfig,
) -> Result<MultiHypothesis> {
    let obs = &scene.observations;
    let kind = scene.kind;
    let net = || network.ok_or_else(|| ConsacError::InvalidParameter(format!("{} needs weights", method.name())));
    match method {
        Method::Consac => run_consac(obs, kind, config, &NetworkSampler::conditional(net()?)),
        Method::Unconditional => run_consac(obs, kind, config, &NetworkSampler::state_blind(net()?)),
        Method::Uniform => run_consac(obs, kind, config, &Uniform),
        Method::UniformWithRemoval => run_consac(obs, kind, config, &UniformWithRemoval),
        Method::SeqRansac => sequential_ransac_best_of(obs, kind, config),
    }
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub sampled: MultiHypothesis,
    /// Refined, ranked and selected instances.
    pub models: Vec<ModelInstance>,
    pub ranking: Vec<usize>,
    pub cutoff: usize,
    /// Index into `models` of the nearest instance under `theta`, -1 for
    /// outliers.
    pub assignments: Vec<i64>,
}

impl Fit {
    pub fn steps(&self) -> &[SearchStep] {
        &self.sampled.steps
    }
}

pub fn fit_scene(
    scene: &Scene,
    method: Method,
    network: Option<&Network>,
    sampler: &SamplerConfig,
    refine: &RefineConfig,
) -> Result<Fit> {
    let sampled = sample(scene, method, network, sampler)?;
    let post = postprocess(&sampled.models, &scene.observations, scene.kind, &sampler.scoring()?, refine)?;
    let assignments = assign_labels(&post.models, &scene.observations, refine.theta)
        .into_iter()
        .map(|a| a.map_or(-1, |j| j as i64))
        .collect();
    Ok(Fit {
        sampled,
        models: post.models,
        ranking: post.ranking,
        cutoff: post.cutoff,
        assignments,
    })
}
