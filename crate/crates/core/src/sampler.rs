//! Conditional sampling loops, plus sequential and unconditional baselines.
//!
//! A multi-hypothesis is built one instance at a time. For every instance a
//! pool of `S` single-instance hypotheses is sampled from weights that depend
//! on the current state, the best one under `g_s` is kept and the state is
//! updated. `P` such multi-hypotheses are sampled and the one with the
//! highest joint score wins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ConsacError, Result};
use crate::geometry::{ModelInstance, ModelKind, Observation};
use crate::scoring::{soft_inliers, ScoringParams, StateVector};

/// Floor applied to sampling weights before normalization.
pub const WEIGHT_FLOOR: f64 = 1e-9;
/// Extra attempts for a pool slot whose minimal set is degenerate.
pub const DEGENERACY_RETRIES: usize = 4;

/// RNG for stream `stream` of the generator seeded by `seed`. Streams of the
/// same seed are independent, so pools can run in any order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSourceKind {
    Network,
    Uniform,
    UniformWithRemoval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// `M`
    pub instances: usize,
    /// `S`
    pub single_samples: usize,
    /// `P`
    pub multi_samples: usize,
    pub tau: f64,
    pub weight_source: WeightSourceKind,
    pub seed: u64,
}

impl SamplerConfig {
    /// Test-time defaults for a model class.
    pub fn for_kind(kind: ModelKind) -> Self {
        let (instances, s, p, tau) = match kind {
            ModelKind::Line => (4, 32, 32, LINE_TAU),
            ModelKind::VanishingPoint => (6, 32, 32, 1e-3),
            ModelKind::Homography => (6, 100, 100, 1e-4),
        };
        SamplerConfig {
            instances,
            single_samples: s,
            multi_samples: p,
            tau,
            weight_source: WeightSourceKind::Network,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.single_samples == 0 || self.multi_samples == 0 {
            return Err(ConsacError::InvalidParameter(
                "M, S and P must all be at least 1".into(),
            ));
        }
        ScoringParams::new(self.tau)?;
        Ok(())
    }

    pub fn scoring(&self) -> Result<ScoringParams> {
        ScoringParams::new(self.tau)
    }
}

/// Inlier threshold for synthetic 2D line fitting in unit-square coordinates.
pub const LINE_TAU: f64 = 0.015;

/// One single-instance hypothesis with the minimal set it was fitted to.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub model: ModelInstance,
    pub indices: Vec<usize>,
    pub log_prob: f64,
}

/// One step of a multi-hypothesis search: the state the weights were
/// computed from and every minimal set drawn for the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchStep {
    pub state: StateVector,
    pub weights: Vec<f64>,
    pub drawn: Vec<Vec<usize>>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHypothesis {
    pub models: Vec<ModelInstance>,
    /// Minimal sets of every hypothesis in every pool, in sampling order.
    pub sampled_indices: Vec<Vec<usize>>,
    pub log_prob: f64,
    /// Joint soft inlier score `g_m`.
    pub score: f64,
    pub steps: Vec<SearchStep>,
}

fn floored_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ConsacError::InvalidParameter(
            "sampling weights must be finite and nonnegative".into(),
        ));
    }
    Ok(weights.iter().map(|&w| w.max(WEIGHT_FLOOR)).collect())
}

/// Normalized sampling distribution after flooring.
pub fn sampling_distribution(weights: &[f64]) -> Result<Vec<f64>> {
    let w = floored_weights(weights)?;
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Draws `c` distinct indices. Each draw is categorical over the remaining
/// indices after flooring and renormalization. Returns the indices and the
/// summed log probability of the draws.
pub fn sample_minimal_set<R: Rng + ?Sized>(weights: &[f64], c: usize, rng: &mut R) -> Result<(Vec<usize>, f64)> {
    if c > weights.len() {
        return Err(ConsacError::TooFewObservations {
            required: c,
            available: weights.len(),
        });
    }
    let mut w = floored_weights(weights)?;
    let mut indices = Vec::with_capacity(c);
    let mut log_prob = 0.0;
    for _ in 0..c {
        let total: f64 = w.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            acc += wi;
            chosen = Some(i);
            if target < acc {
                break;
            }
        }
        let i = chosen.expect("at least one index remains");
        log_prob += (w[i] / total).ln();
        w[i] = 0.0;
        indices.push(i);
    }
    Ok((indices, log_prob))
}

fn is_degenerate(e: &ConsacError) -> bool {
    matches!(
        e,
        ConsacError::DegenerateMinimalSet(_) | ConsacError::SingularModel { .. }
    )
}

/// Samples up to `s` hypotheses. A slot whose minimal set is degenerate is
/// resampled up to [`DEGENERACY_RETRIES`] times and then skipped.
pub fn generate_hypothesis_pool<R: Rng + ?Sized>(
    observations: &[Observation],
    weights: &[f64],
    s: usize,
    kind: ModelKind,
    rng: &mut R,
) -> Result<Vec<Hypothesis>> {
    if weights.len() != observations.len() {
        return Err(ConsacError::ShapeMismatch(format!(
            "{} weights for {} observations",
            weights.len(),
            observations.len()
        )));
    }
    let c = kind.minimal_set_size();
    let mut pool = Vec::with_capacity(s);
    let mut sample = Vec::with_capacity(c);
    for _ in 0..s {
        for _ in 0..=DEGENERACY_RETRIES {
            let (indices, log_prob) = sample_minimal_set(weights, c, rng)?;
            sample.clear();
            sample.extend(indices.iter().map(|&i| observations[i]));
            match kind.fit_minimal(&sample) {
                Ok(model) => {
                    pool.push(Hypothesis {
                        model,
                        indices,
                        log_prob,
                    });
                    break;
                }
                Err(e) if is_degenerate(&e) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    if pool.is_empty() {
        return Err(ConsacError::EmptyPool);
    }
    Ok(pool)
}

/// Index of the largest value, lowest index on ties. NaN never wins.
fn argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Incremental construction of one multi-hypothesis. Training drives many of
/// these in lockstep so the network can be evaluated on a whole batch of
/// states at once.
#[derive(Debug, Clone)]
pub struct InstanceSearch<'a> {
    observations: &'a [Observation],
    kind: ModelKind,
    params: ScoringParams,
    state: StateVector,
    models: Vec<ModelInstance>,
    sampled_indices: Vec<Vec<usize>>,
    log_prob: f64,
    steps: Vec<SearchStep>,
}

impl<'a> InstanceSearch<'a> {
    pub fn new(observations: &'a [Observation], kind: ModelKind, params: ScoringParams) -> Self {
        InstanceSearch {
            observations,
            kind,
            params,
            state: StateVector::zeros(observations.len()),
            models: Vec::new(),
            sampled_indices: Vec::new(),
            log_prob: 0.0,
            steps: Vec::new(),
        }
    }

    pub fn state(&self) -> &StateVector {
        &self.state
    }

    pub fn models(&self) -> &[ModelInstance] {
        &self.models
    }

    pub fn steps(&self) -> &[SearchStep] {
        &self.steps
    }

    /// Samples a pool from `weights`, keeps its best hypothesis under `g_s`
    /// and absorbs it into the state.
    pub fn step<R: Rng + ?Sized>(&mut self, weights: &[f64], s: usize, rng: &mut R) -> Result<&ModelInstance> {
        let pool = generate_hypothesis_pool(self.observations, weights, s, self.kind, rng)?;
        let inlier_scores: Vec<Vec<f64>> = pool
            .iter()
            .map(|h| soft_inliers(&h.model, self.observations, &self.params))
            .collect();
        let best = argmax(inlier_scores.iter().map(|g| self.state.joint_score_with(g)))
            .unwrap_or(0);
        let state_before = self.state.clone();
        self.state.absorb(&inlier_scores[best]);
        self.models.push(pool[best].model);
        let mut drawn = Vec::with_capacity(pool.len());
        for h in pool {
            self.log_prob += h.log_prob;
            self.sampled_indices.push(h.indices.clone());
            drawn.push(h.indices);
        }
        self.steps.push(SearchStep {
            state: state_before,
            weights: weights.to_vec(),
            drawn,
            selected: best,
        });
        Ok(self.models.last().expect("just pushed"))
    }

    pub fn finish(self) -> MultiHypothesis {
        MultiHypothesis {
            score: self.state.sum(),
            models: self.models,
            sampled_indices: self.sampled_indices,
            log_prob: self.log_prob,
            steps: self.steps,
        }
    }
}

/// Produces sampling weights for the observations given the current state.
pub trait WeightSource: Sync {
    fn weights(&self, observations: &[Observation], state: &StateVector) -> Result<Vec<f64>>;
}

impl<F> WeightSource for F
where
    F: Fn(&[Observation], &StateVector) -> Vec<f64> + Sync,
{
    fn weights(&self, observations: &[Observation], state: &StateVector) -> Result<Vec<f64>> {
        Ok(self(observations, state))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Uniform;

impl WeightSource for Uniform {
    fn weights(&self, observations: &[Observation], _state: &StateVector) -> Result<Vec<f64>> {
        let n = observations.len().max(1) as f64;
        Ok(vec![1.0 / n; observations.len()])
    }
}

/// Uniform over observations that are not yet soft inliers (`s < 0.5`) of a
/// selected model.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformWithRemoval;

impl WeightSource for UniformWithRemoval {
    fn weights(&self, _observations: &[Observation], state: &StateVector) -> Result<Vec<f64>> {
        Ok(state
            .entries()
            .iter()
            .map(|&s| if s >= 0.5 { 0.0 } else { 1.0 })
            .collect())
    }
}

/// All `P` candidate multi-hypotheses, in pool order.
pub fn run_consac_candidates<W: WeightSource + ?Sized>(
    observations: &[Observation],
    kind: ModelKind,
    config: &SamplerConfig,
    source: &W,
) -> Result<Vec<MultiHypothesis>> {
    config.validate()?;
    let c = kind.minimal_set_size();
    if observations.len() < c {
        return Err(ConsacError::TooFewObservations {
            required: c,
            available: observations.len(),
        });
    }
    let params = config.scoring()?;
    (0..config.multi_samples)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream_rng(config.seed, p as u64);
            let mut search = InstanceSearch::new(observations, kind, params);
            for _ in 0..config.instances {
                let weights = source.weights(observations, search.state())?;
                search.step(&weights, config.single_samples, &mut rng)?;
            }
            Ok(search.finish())
        })
        .collect()
}

/// Index of the best candidate under `g_m`, lowest index on ties.
pub fn best_candidate(candidates: &[MultiHypothesis]) -> Option<usize> {
    argmax(candidates.iter().map(|c| c.score))
}

/// Full conditional sampling: best of `P` multi-hypotheses.
pub fn run_consac<W: WeightSource + ?Sized>(
    observations: &[Observation],
    kind: ModelKind,
    config: &SamplerConfig,
    source: &W,
) -> Result<MultiHypothesis> {
    let mut candidates = run_consac_candidates(observations, kind, config, source)?;
    let best = best_candidate(&candidates).ok_or(ConsacError::EmptyPool)?;
    Ok(candidates.swap_remove(best))
}

/// Same loops with state-independent weights.
pub fn run_unconditional(
    observations: &[Observation],
    kind: ModelKind,
    config: &SamplerConfig,
    weights: &[f64],
) -> Result<MultiHypothesis> {
    let fixed = |_: &[Observation], _: &StateVector| weights.to_vec();
    run_consac(observations, kind, config, &fixed)
}

/// Single-instance RANSAC with uniform sampling, scored by soft inlier count.
pub fn ransac<R: Rng + ?Sized>(
    observations: &[Observation],
    kind: ModelKind,
    s: usize,
    tau: f64,
    rng: &mut R,
) -> Result<ModelInstance> {
    let params = ScoringParams::new(tau)?;
    let n = observations.len();
    let uniform = vec![1.0 / n.max(1) as f64; n];
    let pool = generate_hypothesis_pool(observations, &uniform, s, kind, rng)?;
    let counts = pool
        .iter()
        .map(|h| soft_inliers(&h.model, observations, &params).iter().sum::<f64>());
    let best = argmax(counts).unwrap_or(0);
    Ok(pool[best].model)
}

/// Sequential RANSAC: fit one instance with uniform-sampling RANSAC, remove
/// its hard inliers (`r < tau`), repeat. Stops early when fewer than `C`
/// observations remain or no valid hypothesis can be sampled.
pub fn sequential_ransac<R: Rng + ?Sized>(
    observations: &[Observation],
    kind: ModelKind,
    m: usize,
    s: usize,
    tau: f64,
    rng: &mut R,
) -> Result<MultiHypothesis> {
    let params = ScoringParams::new(tau)?;
    let c = kind.minimal_set_size();
    let mut remaining: Vec<usize> = (0..observations.len()).collect();
    let mut models = Vec::with_capacity(m);
    let mut sampled_indices = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..m {
        if remaining.len() < c {
            break;
        }
        let subset: Vec<Observation> = remaining.iter().map(|&i| observations[i]).collect();
        let uniform = vec![1.0 / subset.len() as f64; subset.len()];
        let pool = match generate_hypothesis_pool(&subset, &uniform, s, kind, rng) {
            Ok(pool) => pool,
            Err(ConsacError::EmptyPool) => break,
            Err(e) => return Err(e),
        };
        let counts = pool
            .iter()
            .map(|h| soft_inliers(&h.model, &subset, &params).iter().sum::<f64>());
        let best = argmax(counts).unwrap_or(0);
        for h in &pool {
            log_prob += h.log_prob;
            sampled_indices.push(h.indices.iter().map(|&i| remaining[i]).collect());
        }
        let model = pool[best].model;
        remaining.retain(|&i| !(model.residual(&observations[i]) < tau));
        models.push(model);
    }
    let score = crate::scoring::multi_instance_score(&models, observations, &params);
    Ok(MultiHypothesis {
        models,
        sampled_indices,
        log_prob,
        score,
        steps: Vec::new(),
    })
}

/// Best of `p` independent sequential RANSAC runs under `g_m`, the baseline
/// at the same `S × P` budget as conditional sampling.
pub fn sequential_ransac_best_of(
    observations: &[Observation],
    kind: ModelKind,
    config: &SamplerConfig,
) -> Result<MultiHypothesis> {
    config.validate()?;
    let mut runs: Vec<MultiHypothesis> = (0..config.multi_samples)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream_rng(config.seed, p as u64);
            sequential_ransac(
                observations,
                kind,
                config.instances,
                config.single_samples,
                config.tau,
                &mut rng,
            )
        })
        .collect::<Result<_>>()?;
    let best = best_candidate(&runs).ok_or(ConsacError::EmptyPool)?;
    Ok(runs.swap_remove(best))
}
