//! Result documents written by `fit` and read back by `eval`.

use std::path::Path;

use consac::refine::RefineConfig;
use consac::sampler::SamplerConfig;
use consac::{ModelInstance, ModelKind};
use serde::{Deserialize, Serialize};

use crate::pipeline::{Fit, Method};
use crate::CliError;

pub const RESULT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitResult {
    pub version: u32,
    /// File name of the scene this result belongs to.
    pub scene: String,
    pub kind: ModelKind,
    pub method: Method,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub refine: RefineConfig,
    pub weights_sha256: Option<String>,
    /// Multi-hypothesis before refinement, in selection order.
    pub sampled_models: Vec<Vec<f64>>,
    pub score: f64,
    /// Refined models over the ranked, selected prefix.
    pub models: Vec<Vec<f64>>,
    pub ranking: Vec<usize>,
    pub cutoff: usize,
    pub assignments: Vec<i64>,
}

impl FitResult {
    pub fn new(
        scene: String,
        kind: ModelKind,
        method: Method,
        sampler: SamplerConfig,
        refine: RefineConfig,
        weights_sha256: Option<String>,
        fit: &Fit,
    ) -> Self {
        FitResult {
            version: RESULT_VERSION,
            scene,
            kind,
            method,
            seed: sampler.seed,
            sampler,
            refine,
            weights_sha256,
            sampled_models: fit.sampled.models.iter().map(ModelInstance::params).collect(),
            score: fit.sampled.score,
            models: fit.models.iter().map(ModelInstance::params).collect(),
            ranking: fit.ranking.clone(),
            cutoff: fit.cutoff,
            assignments: fit.assignments.clone(),
        }
    }

    pub fn models(&self) -> Result<Vec<ModelInstance>, CliError> {
        self.models
            .iter()
            .map(|p| ModelInstance::from_params(self.kind, p).map_err(|e| CliError::Data(format!("{}: {e}", self.scene))))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let r: FitResult =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if r.version != RESULT_VERSION {
            return Err(CliError::Data(format!(
                "{}: result version {} is not {RESULT_VERSION}",
                path.display(),
                r.version
            )));
        }
        Ok(r)
    }
}
