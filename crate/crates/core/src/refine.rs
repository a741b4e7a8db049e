//! Test-time post-processing: EM refinement, greedy instance ranking and
//! instance selection by marginal inlier count.

use serde::{Deserialize, Serialize};

use crate::error::{ConsacError, Result};
use crate::geometry::{weighted_refit, ModelInstance, ModelKind, Observation};
use crate::sampler::LINE_TAU;
use crate::scoring::{soft_inliers, ScoringParams, StateVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Standard deviation of the Gaussian residual model.
    pub sigma: f64,
    pub em_iterations: usize,
    /// Rounds of refitting each model to its hard inliers after EM.
    pub refit_iterations: usize,
    /// Hard inlier threshold for refitting and selection.
    pub theta: f64,
    /// Minimum number of new hard inliers an instance must add to be kept.
    pub min_increment: f64,
}

impl RefineConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Line => RefineConfig {
                sigma: 0.0075,
                em_iterations: 0,
                refit_iterations: 3,
                theta: LINE_TAU,
                min_increment: 10.0,
            },
            ModelKind::VanishingPoint => RefineConfig {
                sigma: 1e-8,
                em_iterations: 10,
                refit_iterations: 0,
                theta: 1e-3,
                min_increment: 0.0,
            },
            ModelKind::Homography => RefineConfig {
                sigma: 1e-9,
                em_iterations: 0,
                refit_iterations: 2,
                theta: 1e-3,
                min_increment: 6.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(ConsacError::InvalidParameter(format!(
                "EM sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.theta > 0.0) || !(self.min_increment >= 0.0) {
            return Err(ConsacError::InvalidParameter(
                "selection thresholds must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn log_likelihood_terms(models: &[ModelInstance], y: &Observation, sigma: f64, out: &mut Vec<f64>) {
    let norm = -sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    out.clear();
    out.extend(models.iter().map(|m| {
        let r = m.residual(y);
        let z = r / sigma;
        if z.is_finite() {
            -0.5 * z * z + norm
        } else {
            f64::NEG_INFINITY
        }
    }));
}

fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log Π_y Σ_h p(y|h)` with Gaussian residual likelihood and unit priors.
pub fn log_likelihood(models: &[ModelInstance], observations: &[Observation], sigma: f64) -> f64 {
    let mut terms = Vec::with_capacity(models.len());
    observations
        .iter()
        .map(|y| {
            log_likelihood_terms(models, y, sigma, &mut terms);
            logsumexp(&terms)
        })
        .sum()
}

/// Posterior `p(h|y)` per observation (rows) and model (columns).
pub fn responsibilities(models: &[ModelInstance], observations: &[Observation], sigma: f64) -> Vec<Vec<f64>> {
    let mut terms = Vec::with_capacity(models.len());
    observations
        .iter()
        .map(|y| {
            log_likelihood_terms(models, y, sigma, &mut terms);
            let lse = logsumexp(&terms);
            if lse == f64::NEG_INFINITY {
                return vec![1.0 / models.len() as f64; models.len()];
            }
            terms.iter().map(|t| (t - lse).exp()).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub models: Vec<ModelInstance>,
    /// Data log-likelihood before the first and after every iteration.
    pub log_likelihood: Vec<f64>,
}

/// EM over fixed-variance Gaussian mixtures of residuals. Models whose total
/// responsibility is below the minimal set size are left untouched.
pub fn em_refine(
    models: &[ModelInstance],
    observations: &[Observation],
    config: &RefineConfig,
    kind: ModelKind,
) -> Result<EmResult> {
    config.validate()?;
    let mut current = models.to_vec();
    let mut ll = vec![log_likelihood(&current, observations, config.sigma)];
    if current.is_empty() || observations.is_empty() {
        return Ok(EmResult {
            models: current,
            log_likelihood: ll,
        });
    }
    let c = kind.minimal_set_size() as f64;
    for _ in 0..config.em_iterations {
        let resp = responsibilities(&current, observations, config.sigma);
        for (j, model) in current.iter_mut().enumerate() {
            let weights: Vec<f64> = resp.iter().map(|r| r[j]).collect();
            if weights.iter().sum::<f64>() < c {
                continue;
            }
            match weighted_refit(kind, observations, &weights, Some(model)) {
                Ok(m) => *model = m,
                Err(ConsacError::InsufficientSupport { .. })
                | Err(ConsacError::DegenerateMinimalSet(_))
                | Err(ConsacError::SingularModel { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        ll.push(log_likelihood(&current, observations, config.sigma));
    }
    Ok(EmResult {
        models: current,
        log_likelihood: ll,
    })
}

/// Refits every model to its own hard inliers (`r < theta`), repeated
/// `iterations` times. Models with fewer than a minimal set of inliers, or
/// whose refit fails, are kept as they are.
pub fn inlier_refit(
    models: &[ModelInstance],
    observations: &[Observation],
    kind: ModelKind,
    theta: f64,
    iterations: usize,
) -> Vec<ModelInstance> {
    let c = kind.minimal_set_size() as f64;
    models
        .iter()
        .map(|m| {
            let mut model = *m;
            for _ in 0..iterations {
                let weights: Vec<f64> = observations
                    .iter()
                    .map(|y| if model.residual(y) < theta { 1.0 } else { 0.0 })
                    .collect();
                if weights.iter().sum::<f64>() < c {
                    break;
                }
                match weighted_refit(kind, observations, &weights, Some(&model)) {
                    Ok(next) => model = next,
                    Err(_) => break,
                }
            }
            model
        })
        .collect()
}

/// Greedy order by joint soft inlier count; ties go to the lower index.
pub fn rank_instances(models: &[ModelInstance], observations: &[Observation], params: &ScoringParams) -> Vec<usize> {
    let scores: Vec<Vec<f64>> = models
        .iter()
        .map(|m| soft_inliers(m, observations, params))
        .collect();
    let mut state = StateVector::zeros(observations.len());
    let mut remaining: Vec<usize> = (0..models.len()).collect();
    let mut order = Vec::with_capacity(models.len());
    while !remaining.is_empty() {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, &q) in remaining.iter().enumerate() {
            let s = state.joint_score_with(&scores[q]);
            if s > best_score {
                best_score = s;
                best = k;
            }
        }
        let q = remaining.remove(best);
        state.absorb(&scores[q]);
        order.push(q);
    }
    order
}

/// New hard inliers (`r < theta`) contributed by each model in order.
pub fn hard_increments(models: &[ModelInstance], observations: &[Observation], theta: f64) -> Vec<usize> {
    let mut claimed = vec![false; observations.len()];
    models
        .iter()
        .map(|m| {
            let mut inc = 0;
            for (c, y) in claimed.iter_mut().zip(observations) {
                if !*c && m.residual(y) < theta {
                    *c = true;
                    inc += 1;
                }
            }
            inc
        })
        .collect()
}

/// Length of the longest prefix whose every instance adds at least
/// `min_increment` new hard inliers. The first instance is always kept.
pub fn select_prefix(increments: &[usize], min_increment: f64) -> usize {
    if increments.is_empty() {
        return 0;
    }
    1 + increments[1..]
        .iter()
        .take_while(|&&inc| inc as f64 >= min_increment)
        .count()
}

pub fn select_instances(
    ranked: &[ModelInstance],
    observations: &[Observation],
    config: &RefineConfig,
) -> Vec<ModelInstance> {
    let inc = hard_increments(ranked, observations, config.theta);
    ranked[..select_prefix(&inc, config.min_increment)].to_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Postprocessed {
    /// Refined models in ranked order, truncated to the selected prefix.
    pub models: Vec<ModelInstance>,
    /// Ranking permutation over the refined input models.
    pub ranking: Vec<usize>,
    /// Number of ranked models kept.
    pub cutoff: usize,
}

/// EM, hard-inlier refit, ranking and selection, in that order.
pub fn postprocess(
    models: &[ModelInstance],
    observations: &[Observation],
    kind: ModelKind,
    params: &ScoringParams,
    config: &RefineConfig,
) -> Result<Postprocessed> {
    config.validate()?;
    let mut refined = if config.em_iterations > 0 {
        em_refine(models, observations, config, kind)?.models
    } else {
        models.to_vec()
    };
    if config.refit_iterations > 0 {
        refined = inlier_refit(&refined, observations, kind, config.theta, config.refit_iterations);
    }
    let ranking = rank_instances(&refined, observations, params);
    let ordered: Vec<ModelInstance> = ranking.iter().map(|&i| refined[i]).collect();
    let cutoff = select_prefix(&hard_increments(&ordered, observations, config.theta), config.min_increment);
    Ok(Postprocessed {
        models: ordered[..cutoff].to_vec(),
        ranking,
        cutoff,
    })
}

/// Reorders models by [`rank_instances`].
pub fn ranked(models: &[ModelInstance], observations: &[Observation], params: &ScoringParams) -> Vec<ModelInstance> {
    rank_instances(models, observations, params)
        .into_iter()
        .map(|i| models[i])
        .collect()
}
