//! Soft inlier scoring and the per-observation state used for conditioning.

use crate::error::{ConsacError, Result};
use crate::geometry::{ModelInstance, Observation};

/// Inlier threshold `tau` and softness `beta = 5 / tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringParams {
    tau: f64,
    beta: f64,
}

impl ScoringParams {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(ConsacError::InvalidParameter(format!(
                "inlier threshold must be positive, got {tau}"
            )));
        }
        Ok(ScoringParams {
            tau,
            beta: 5.0 / tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1 - σ(βr - βτ)`. NaN residuals score 0.
pub fn soft_inlier(r: f64, params: &ScoringParams) -> f64 {
    if r.is_nan() {
        return 0.0;
    }
    sigmoid(params.beta * (params.tau - r))
}

/// Soft inlier score of every observation under one model.
pub fn soft_inliers(model: &ModelInstance, observations: &[Observation], params: &ScoringParams) -> Vec<f64> {
    observations
        .iter()
        .map(|y| soft_inlier(model.residual(y), params))
        .collect()
}

/// Per-observation conditioning state, the running maximum of soft inlier
/// scores over all selected models. Starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn zeros(n: usize) -> Self {
        StateVector(vec![0.0; n])
    }

    pub fn from_entries(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(ConsacError::InvalidParameter(
                "state entries must lie in [0, 1]".into(),
            ));
        }
        Ok(StateVector(entries))
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Elementwise max with the soft inlier scores of a newly selected model.
    pub fn absorb(&mut self, scores: &[f64]) {
        for (s, &g) in self.0.iter_mut().zip(scores) {
            if g > *s {
                *s = g;
            }
        }
    }

    /// `Σ_i max(s_i, g_i)`, the joint score of the selected models plus one
    /// more model with soft inlier scores `scores`.
    pub fn joint_score_with(&self, scores: &[f64]) -> f64 {
        self.0.iter().zip(scores).map(|(&s, &g)| s.max(g)).sum()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `g_m`: sum over observations of the best soft inlier score of any model.
pub fn multi_instance_score(models: &[ModelInstance], observations: &[Observation], params: &ScoringParams) -> f64 {
    compute_state(models, observations, params).sum()
}

/// `g_s`: the joint score of `selected` extended by `h`.
pub fn single_instance_score(
    h: &ModelInstance,
    observations: &[Observation],
    selected: &[ModelInstance],
    params: &ScoringParams,
) -> f64 {
    let state = compute_state(selected, observations, params);
    state.joint_score_with(&soft_inliers(h, observations, params))
}

pub fn compute_state(selected: &[ModelInstance], observations: &[Observation], params: &ScoringParams) -> StateVector {
    let mut state = StateVector::zeros(observations.len());
    for model in selected {
        state.absorb(&soft_inliers(model, observations, params));
    }
    state
}

/// Average joint soft inlier count of a non-empty prefix of selected models.
pub fn cumulative_inlier_ratio(
    prefix: &[ModelInstance],
    observations: &[Observation],
    params: &ScoringParams,
) -> Result<f64> {
    if prefix.is_empty() {
        return Err(ConsacError::EmptyPrefix);
    }
    if observations.is_empty() {
        return Ok(0.0);
    }
    Ok(multi_instance_score(prefix, observations, params) / observations.len() as f64)
}

/// `g_ci` for every prefix length `1..=models.len()` in one pass.
pub fn cumulative_inlier_ratios(
    models: &[ModelInstance],
    observations: &[Observation],
    params: &ScoringParams,
) -> Vec<f64> {
    let n = observations.len().max(1) as f64;
    let mut state = StateVector::zeros(observations.len());
    models
        .iter()
        .map(|m| {
            state.absorb(&soft_inliers(m, observations, params));
            state.sum() / n
        })
        .collect()
}
