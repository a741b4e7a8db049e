//! Policy-gradient training of the sampling network.
//!
//! Per scene, `K` multi-hypotheses are selected, each the best of `P`
//! sampled ones. Their task losses are clamped and a per-scene mean baseline
//! is subtracted; the advantage weights the log-probability gradient of
//! every minimal set drawn for that sample. In self-supervised mode an
//! inlier masking regularizer on the sampling weights is added and
//! differentiated through the forward pass.

use std::path::PathBuf;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment_correspondences, RebalancedSampler, Scene};
use crate::error::{ConsacError, Result};
use crate::eval::{hungarian_assign, line_pair_error, vp_angle_error, CostMatrix, Segment};
use crate::geometry::{ModelInstance, ModelKind, Observation};
use crate::network::{log_prob_dlogits, Architecture, ForwardCache, Mode, Network, NetworkInput};
use crate::sampler::{best_candidate, stream_rng, InstanceSearch, MultiHypothesis, LINE_TAU};
use crate::scoring::{cumulative_inlier_ratios, ScoringParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Supervised,
    SelfSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub loss: LossKind,
    pub learning_rate: f64,
    /// `B`
    pub batch_size: usize,
    pub epochs: usize,
    /// `K`
    pub samples: usize,
    /// `S`
    pub single_samples: usize,
    /// `P`
    pub multi_samples: usize,
    /// `M`
    pub instances: usize,
    pub tau: f64,
    /// Weight of the inlier masking regularizer.
    pub kappa: f64,
    pub loss_clamp: f64,
    pub observations_per_scene: usize,
    pub channels: usize,
    pub blocks: usize,
    pub batch_norm: bool,
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn vanishing_points() -> Self {
        TrainConfig {
            kind: ModelKind::VanishingPoint,
            loss: LossKind::Supervised,
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 400,
            samples: 4,
            single_samples: 2,
            multi_samples: 2,
            instances: 3,
            tau: 1e-3,
            kappa: 1e-2,
            loss_clamp: 0.3,
            observations_per_scene: 256,
            channels: 128,
            blocks: 6,
            batch_norm: true,
            augment: false,
            seed: 0,
        }
    }

    pub fn homographies() -> Self {
        TrainConfig {
            kind: ModelKind::Homography,
            loss: LossKind::SelfSupervised,
            learning_rate: 2e-6,
            batch_size: 1,
            epochs: 100,
            samples: 8,
            single_samples: 2,
            multi_samples: 2,
            instances: 6,
            tau: 1e-4,
            kappa: 1e-2,
            loss_clamp: 0.3,
            observations_per_scene: 256,
            channels: 128,
            blocks: 6,
            batch_norm: false,
            augment: true,
            seed: 0,
        }
    }

    /// Synthetic 2D lines with a small network.
    pub fn lines() -> Self {
        TrainConfig {
            kind: ModelKind::Line,
            loss: LossKind::Supervised,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 4,
            samples: 4,
            single_samples: 2,
            multi_samples: 2,
            instances: 4,
            tau: LINE_TAU,
            kappa: 1e-2,
            loss_clamp: 0.3,
            observations_per_scene: 256,
            channels: 32,
            blocks: 3,
            batch_norm: true,
            augment: false,
            seed: 0,
        }
    }

    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Line => Self::lines(),
            ModelKind::VanishingPoint => Self::vanishing_points(),
            ModelKind::Homography => Self::homographies(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.kind.observation_dim(),
            channels: self.channels,
            blocks: self.blocks,
            batch_norm: self.batch_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.batch_size,
            self.samples,
            self.single_samples,
            self.multi_samples,
            self.instances,
            self.observations_per_scene,
        ];
        if positive.contains(&0) {
            return Err(ConsacError::InvalidParameter(
                "B, K, S, P, M and the scene size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.loss_clamp > 0.0) || !(self.kappa >= 0.0) {
            return Err(ConsacError::InvalidParameter(
                "learning rate and clamp must be positive, kappa nonnegative".into(),
            ));
        }
        ScoringParams::new(self.tau)?;
        Ok(())
    }
}

/// Hungarian-matched mean pair loss between the first `min(M, G)`
/// estimates and the `G` ground-truth instances.
pub fn supervised_loss(estimates: usize, gt: usize, pair_loss: impl Fn(usize, usize) -> f64) -> Result<f64> {
    let rows = estimates.min(gt);
    if rows == 0 {
        return Err(ConsacError::EmptyMatrix);
    }
    let cost = CostMatrix::from_fn(rows, gt, |r, c| pair_loss(r, c))?;
    let (_, total) = hungarian_assign(&cost)?;
    Ok(total / rows as f64)
}

/// Negative mean cumulative inlier ratio over all prefixes of `models`.
pub fn self_supervised_loss(models: &[ModelInstance], observations: &[Observation], params: &ScoringParams) -> f64 {
    if models.is_empty() {
        return 0.0;
    }
    let ratios = cumulative_inlier_ratios(models, observations, params);
    -ratios.iter().sum::<f64>() / models.len() as f64
}

/// Mean of `max(0, p̃ + s - 1)` with `p̃ = p / max p`.
pub fn imr_penalty(weights: &[f64], state: &[f64]) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    weights
        .iter()
        .zip(state)
        .map(|(&p, &s)| (p / max + s - 1.0).max(0.0))
        .sum::<f64>()
        / weights.len() as f64
}

/// Adds `scale · ∂(Σ_i max(0, p̃_i + s_i - 1)) / ∂logits` for input `k`.
fn imr_dlogits(cache: &ForwardCache, k: usize, state: &[f64], scale: f64, dlogits: &mut [f64]) {
    let start = cache.segments()[k].start;
    let o = cache.sigmoid_outputs(k);
    let (j, omax) = o
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bj, bv), (i, &v)| if v > bv { (i, v) } else { (bj, bv) });
    let mut d_o = vec![0.0; o.len()];
    for (i, (&oi, &s)) in o.iter().zip(state).enumerate() {
        if i != j && oi / omax + s - 1.0 > 0.0 {
            d_o[i] += scale / omax;
            d_o[j] -= scale * oi / (omax * omax);
        }
    }
    for (i, (&d, &oi)) in d_o.iter().zip(o.iter()).enumerate() {
        dlogits[start + i] += d * oi * (1.0 - oi);
    }
}

/// Clamped losses minus their mean.
pub fn advantages(losses: &[f64], clamp: f64) -> Vec<f64> {
    let clamped: Vec<f64> = losses.iter().map(|l| l.clamp(-clamp, clamp)).collect();
    let mean = clamped.iter().sum::<f64>() / clamped.len().max(1) as f64;
    clamped.iter().map(|l| l - mean).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Cosine annealing from `lr0` at step 0 to `1e-3 · lr0` at the last step.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    let floor = 1e-3 * lr0;
    if total_steps <= 1 {
        return lr0;
    }
    let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    floor + (lr0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Ground truth in the form the per-pair loss needs.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Lines(Vec<Segment>),
    VanishingPoints(Vec<Vector3<f64>>, Matrix3<f64>),
    Homographies(Vec<Vec<Observation>>),
    None,
}

impl Targets {
    pub fn from_scene(scene: &Scene) -> Targets {
        let Some(models) = &scene.gt_models else {
            return Targets::None;
        };
        match scene.kind {
            ModelKind::Line => Targets::Lines(
                models
                    .iter()
                    .enumerate()
                    .filter_map(|(j, m)| Segment::from_support(m.as_line()?, &scene.support(j)))
                    .collect(),
            ),
            ModelKind::VanishingPoint => Targets::VanishingPoints(
                models.iter().filter_map(|m| m.as_vanishing_point().copied()).collect(),
                scene.intrinsics.unwrap_or_else(Matrix3::identity),
            ),
            ModelKind::Homography => Targets::Homographies((0..models.len()).map(|j| scene.support(j)).collect()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Lines(v) => v.len(),
            Targets::VanishingPoints(v, _) => v.len(),
            Targets::Homographies(v) => v.len(),
            Targets::None => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Task loss of one estimate against ground-truth instance `j`: the
    /// larger endpoint distance for lines, the angle in radians for vanishing
    /// points and the mean root transfer error on the labeled inliers for
    /// homographies.
    pub fn pair_loss(&self, estimate: &ModelInstance, j: usize) -> f64 {
        let loss = match self {
            Targets::Lines(segs) => line_pair_error(estimate, &segs[j]),
            Targets::VanishingPoints(vps, k) => match estimate.as_vanishing_point() {
                Some(v) => vp_angle_error(&vps[j], v, k).map_or(f64::MAX, f64::to_radians),
                None => f64::MAX,
            },
            Targets::Homographies(supports) => {
                let s = &supports[j];
                s.iter().map(|y| estimate.residual(y).sqrt()).sum::<f64>() / s.len().max(1) as f64
            }
            Targets::None => 0.0,
        };
        if loss.is_finite() {
            loss
        } else {
            f64::MAX / 1e3
        }
    }
}

/// A scene prepared for one training step.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub id: usize,
    pub observations: Vec<Observation>,
    pub targets: Targets,
}

impl TrainScene {
    /// Subsamples to exactly `n` observations: without replacement when
    /// enough are available, otherwise all of them plus draws with
    /// replacement.
    pub fn prepare<R: Rng + ?Sized>(scene: &Scene, id: usize, n: usize, augment: bool, rng: &mut R) -> Result<Self> {
        if scene.observations.is_empty() {
            return Err(ConsacError::TooFewObservations {
                required: 1,
                available: 0,
            });
        }
        let scene = if augment && scene.kind == ModelKind::Homography {
            augment_correspondences(scene, rng)?
        } else {
            scene.clone()
        };
        let targets = Targets::from_scene(&scene);
        let total = scene.observations.len();
        let mut idx: Vec<usize> = (0..total).collect();
        if total >= n {
            idx.shuffle(rng);
            idx.truncate(n);
        } else {
            while idx.len() < n {
                idx.push(rng.random_range(0..total));
            }
            idx.shuffle(rng);
        }
        Ok(TrainScene {
            id,
            observations: idx.iter().map(|&i| scene.observations[i]).collect(),
            targets,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Mean unclamped task loss of the selected multi-hypotheses.
    pub mean_loss: f64,
    pub mean_imr: f64,
    pub lr: f64,
}

fn task_loss(mh: &MultiHypothesis, scene: &TrainScene, config: &TrainConfig, params: &ScoringParams) -> Result<f64> {
    match config.loss {
        LossKind::SelfSupervised => Ok(self_supervised_loss(&mh.models, &scene.observations, params)),
        LossKind::Supervised => {
            if scene.targets.is_empty() {
                return Err(ConsacError::InvalidParameter(format!(
                    "scene {} has no ground truth for supervised training",
                    scene.id
                )));
            }
            supervised_loss(mh.models.len(), scene.targets.len(), |r, c| {
                scene.targets.pair_loss(&mh.models[r], c)
            })
        }
    }
}

/// One policy-gradient update on a batch of prepared scenes.
pub fn reinforce_step(
    network: &mut Network,
    adam: &mut Adam,
    batch: &[TrainScene],
    config: &TrainConfig,
    lr: f64,
    step_seed: u64,
) -> Result<StepStats> {
    let params = ScoringParams::new(config.tau)?;
    let (k_n, p_n) = (config.samples, config.multi_samples);
    let per_scene = k_n * p_n;
    let mut searches: Vec<(InstanceSearch<'_>, ChaCha8Rng)> = Vec::with_capacity(batch.len() * per_scene);
    for scene in batch {
        for _ in 0..per_scene {
            let stream = searches.len() as u64;
            searches.push((
                InstanceSearch::new(&scene.observations, config.kind, params),
                stream_rng(step_seed, stream),
            ));
        }
    }
    let scene_of = |i: usize| i / per_scene;

    for _ in 0..config.instances {
        let inputs = searches
            .iter()
            .enumerate()
            .map(|(i, (s, _))| NetworkInput::new(&batch[scene_of(i)].observations, s.state()))
            .collect::<Result<Vec<_>>>()?;
        let out = network.forward_batch(&inputs, Mode::Train, false)?;
        if let Some(stats) = &out.batch_stats {
            network.update_running_stats(stats);
        }
        searches
            .par_iter_mut()
            .zip(out.probs.par_iter())
            .try_for_each(|((search, rng), probs)| search.step(probs, config.single_samples, rng).map(|_| ()))?;
    }

    let results: Vec<MultiHypothesis> = searches.into_iter().map(|(s, _)| s.finish()).collect();
    let mut losses = Vec::with_capacity(batch.len() * k_n);
    let mut coefficients = vec![0.0; results.len()];
    for (b, scene) in batch.iter().enumerate() {
        let mut scene_losses = Vec::with_capacity(k_n);
        for k in 0..k_n {
            let group = &results[(b * k_n + k) * p_n..(b * k_n + k + 1) * p_n];
            let best = best_candidate(group).unwrap_or(0);
            let loss = task_loss(&group[best], scene, config, &params)?;
            if !loss.is_finite() {
                return Err(ConsacError::NonFiniteGradient { scene: scene.id });
            }
            scene_losses.push(loss);
        }
        let adv = advantages(&scene_losses, config.loss_clamp);
        for k in 0..k_n {
            for p in 0..p_n {
                coefficients[(b * k_n + k) * p_n + p] = adv[k] / (k_n * batch.len()) as f64;
            }
        }
        losses.extend(scene_losses);
    }

    let use_imr = config.loss == LossKind::SelfSupervised && config.kappa > 0.0;
    let mut grad = vec![0.0; network.num_params()];
    let mut imr_total = 0.0;
    for m in 0..config.instances {
        let inputs = results
            .iter()
            .enumerate()
            .map(|(i, r)| NetworkInput::new(&batch[scene_of(i)].observations, &r.steps[m].state))
            .collect::<Result<Vec<_>>>()?;
        let out = network.forward_batch(&inputs, Mode::Train, true)?;
        let cache = out.cache.expect("cache requested");
        let mut dlogits = vec![0.0; cache.segments().last().map_or(0, |s| s.end)];
        for (i, r) in results.iter().enumerate() {
            let drawn: Vec<usize> = r.steps[m].drawn.iter().flatten().copied().collect();
            log_prob_dlogits(&cache, i, &drawn, coefficients[i], &mut dlogits)?;
            if use_imr {
                let state = r.steps[m].state.entries();
                let n = state.len() as f64;
                imr_total += imr_penalty(&out.probs[i], state);
                let scale = config.kappa / (results.len() as f64 * config.instances as f64 * n);
                imr_dlogits(&cache, i, state, scale, &mut dlogits);
            }
            let seg = cache.segments()[i].clone();
            if dlogits[seg].iter().any(|d| !d.is_finite()) {
                return Err(ConsacError::NonFiniteGradient {
                    scene: batch[scene_of(i)].id,
                });
            }
        }
        let g = network.backward(&cache, &dlogits)?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(ConsacError::NonFiniteGradient { scene: batch[0].id });
    }
    adam.step(network.params_mut(), &grad, lr);
    Ok(StepStats {
        mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        mean_imr: imr_total / (results.len() * config.instances).max(1) as f64,
        lr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    /// Mean logged loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.log.iter().filter(|r| r.epoch == e).map(|r| r.mean_loss).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }

    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoint directory; `epoch_<n>.json` is written after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Group key per scene; when present, scenes are drawn group-first.
    pub groups: Option<Vec<usize>>,
}

pub fn train(dataset: &[Scene], config: &TrainConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    let network = Network::new(config.architecture(), config.seed)?;
    train_from(network, dataset, config, options)
}

/// Trains `network` for `config.epochs` epochs of `ceil(|dataset| / B)`
/// steps each.
pub fn train_from(
    mut network: Network,
    dataset: &[Scene],
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ConsacError::InvalidParameter("training set is empty".into()));
    }
    if network.architecture().input_dim != config.kind.observation_dim() {
        return Err(ConsacError::ShapeMismatch(
            "network input dimension does not match the model class".into(),
        ));
    }
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut adam = Adam::new(network.num_params());
    let mut log = Vec::with_capacity(total_steps);
    let mut rebalanced = match &options.groups {
        Some(keys) => {
            if keys.len() != dataset.len() {
                return Err(ConsacError::ShapeMismatch("one group key per scene required".into()));
            }
            Some(RebalancedSampler::from_keys(keys, config.seed)?)
        }
        None => None,
    };
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| ConsacError::io(dir, e))?;
    }
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order_rng = stream_rng(config.seed, (1 << 32) + epoch as u64);
        let order: Vec<usize> = match rebalanced.as_mut() {
            Some(s) => (0..dataset.len()).map(|_| s.draw().1).collect(),
            None => {
                let mut o: Vec<usize> = (0..dataset.len()).collect();
                o.shuffle(&mut order_rng);
                o
            }
        };
        for chunk in order.chunks(config.batch_size) {
            let mut prep_rng = stream_rng(config.seed, (2 << 32) + step as u64);
            let batch = chunk
                .iter()
                .map(|&i| {
                    TrainScene::prepare(
                        &dataset[i],
                        i,
                        config.observations_per_scene,
                        config.augment,
                        &mut prep_rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = cosine_lr(config.learning_rate, step, total_steps);
            let step_seed: u64 = stream_rng(config.seed, (3 << 32) + step as u64).random();
            let stats = reinforce_step(&mut network, &mut adam, &batch, config, lr, step_seed)?;
            log.push(LogRecord {
                epoch,
                step,
                mean_loss: stats.mean_loss,
                lr,
            });
            step += 1;
        }
        if let Some(dir) = &options.checkpoint_dir {
            network.save(&dir.join(format!("epoch_{epoch}.json")))?;
        }
    }
    Ok(TrainOutcome { network, log })
}
