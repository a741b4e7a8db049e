//! Synthetic scenes, scene documents, augmentation and rebalanced sampling.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ConsacError, Result};
use crate::geometry::{ModelInstance, ModelKind, Observation};

pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub kind: ModelKind,
    pub observations: Vec<Observation>,
    /// Index into `gt_models` per observation, `-1` for outliers.
    pub gt_labels: Option<Vec<i64>>,
    pub gt_models: Option<Vec<ModelInstance>>,
    pub intrinsics: Option<Matrix3<f64>>,
    pub image_size: Option<(u32, u32)>,
}

impl Scene {
    pub fn new(kind: ModelKind, observations: Vec<Observation>) -> Self {
        Scene {
            kind,
            observations,
            gt_labels: None,
            gt_models: None,
            intrinsics: None,
            image_size: None,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Observations labeled as belonging to ground-truth model `j`.
    pub fn support(&self, j: usize) -> Vec<Observation> {
        match &self.gt_labels {
            Some(labels) => self
                .observations
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == j as i64)
                .map(|(o, _)| *o)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.kind.observation_dim();
        if let Some(i) = self.observations.iter().position(|o| o.dim() != dim) {
            return Err(ConsacError::format(
                format!("observations[{i}]"),
                format!("expected {dim} coordinates for {}", self.kind.name()),
            ));
        }
        let n_models = self.gt_models.as_ref().map_or(0, |m| m.len()) as i64;
        if let Some(labels) = &self.gt_labels {
            if labels.len() != self.observations.len() {
                return Err(ConsacError::format(
                    "gt_labels",
                    format!("{} labels for {} observations", labels.len(), self.observations.len()),
                ));
            }
            if let Some(i) = labels.iter().position(|&l| l < -1 || l >= n_models) {
                return Err(ConsacError::format(
                    format!("gt_labels[{i}]"),
                    format!("label {} outside [-1, {n_models})", labels[i]),
                ));
            }
        }
        if let Some(i) = self
            .gt_models
            .iter()
            .flatten()
            .position(|m| m.kind() != self.kind)
        {
            return Err(ConsacError::format(format!("gt_models[{i}]"), "model of a different kind"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthLineConfig {
    pub num_lines: usize,
    pub points_per_line: (usize, usize),
    pub noise: (f64, f64),
    pub outlier_fraction: (f64, f64),
    pub segment_fraction: (f64, f64),
}

impl Default for SynthLineConfig {
    fn default() -> Self {
        SynthLineConfig {
            num_lines: 4,
            points_per_line: (40, 100),
            noise: (0.007, 0.008),
            outlier_fraction: (0.4, 0.6),
            segment_fraction: (0.3, 1.0),
        }
    }
}

/// Seed of item `i` in a corpus generated from `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)).random()
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Part of the line through `p` with direction `d` inside the unit square,
/// as parameters `t0 < t1` of `p + t d`.
fn clip_to_unit_square(p: Vector2<f64>, d: Vector2<f64>) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for k in 0..2 {
        if d[k].abs() < 1e-12 {
            if !(0.0..=1.0).contains(&p[k]) {
                return None;
            }
            continue;
        }
        let a = (0.0 - p[k]) / d[k];
        let b = (1.0 - p[k]) / d[k];
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    (hi > lo).then_some((lo, hi))
}

/// Random lines crossing the unit square with noisy points sampled on a
/// segment of each, plus uniform outliers. Observations are shuffled.
pub fn generate_line_scene(config: &SynthLineConfig, seed: u64) -> Result<Scene> {
    if config.num_lines == 0 || config.points_per_line.0 < 2 || config.points_per_line.1 < config.points_per_line.0 {
        return Err(ConsacError::InvalidParameter("invalid line scene configuration".into()));
    }
    let (fo_lo, fo_hi) = config.outlier_fraction;
    if !(0.0..1.0).contains(&fo_lo) || !(fo_lo..1.0).contains(&fo_hi) {
        return Err(ConsacError::InvalidParameter("outlier fraction must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = sample_range(&mut rng, config.noise);
    let noise = Normal::new(0.0, sigma).map_err(|e| ConsacError::InvalidParameter(e.to_string()))?;
    let mut points: Vec<(Observation, i64)> = Vec::new();
    let mut models = Vec::with_capacity(config.num_lines);
    for j in 0..config.num_lines {
        let (p, d, t0, t1) = loop {
            let a = Vector2::new(rng.random::<f64>(), rng.random::<f64>());
            let b = Vector2::new(rng.random::<f64>(), rng.random::<f64>());
            if (b - a).norm() < 0.05 {
                continue;
            }
            let d = (b - a).normalize();
            if let Some((t0, t1)) = clip_to_unit_square(a, d) {
                break (a, d, t0, t1);
            }
        };
        let chord = t1 - t0;
        let frac = sample_range(&mut rng, config.segment_fraction).min(1.0);
        let start = t0 + rng.random::<f64>() * chord * (1.0 - frac);
        let end = start + chord * frac;
        let line = Vector3::new(p.x, p.y, 1.0).cross(&Vector3::new(p.x + d.x, p.y + d.y, 1.0));
        models.push(ModelInstance::line(line)?);
        let n = rng.random_range(config.points_per_line.0..=config.points_per_line.1);
        for _ in 0..n {
            let t = rng.random_range(start..end);
            let q = p + d * t;
            points.push((
                Observation::point(q.x + noise.sample(&mut rng), q.y + noise.sample(&mut rng)),
                j as i64,
            ));
        }
    }
    let n_in = points.len();
    let f = sample_range(&mut rng, config.outlier_fraction);
    let mut n_out = (f * n_in as f64 / (1.0 - f)).round() as usize;
    let ratio = |o: usize| o as f64 / (o + n_in) as f64;
    while n_out > 0 && ratio(n_out) > fo_hi {
        n_out -= 1;
    }
    while ratio(n_out) < fo_lo {
        n_out += 1;
    }
    for _ in 0..n_out {
        points.push((Observation::point(rng.random(), rng.random()), -1));
    }
    points.shuffle(&mut rng);
    let (observations, labels): (Vec<_>, Vec<_>) = points.into_iter().unzip();
    Ok(Scene {
        kind: ModelKind::Line,
        observations,
        gt_labels: Some(labels),
        gt_models: Some(models),
        intrinsics: None,
        image_size: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthHomographyConfig {
    pub num_planes: usize,
    pub points_per_plane: usize,
    /// Standard deviation of the noise added to the second image.
    pub noise: f64,
    pub outlier_fraction: f64,
}

impl Default for SynthHomographyConfig {
    fn default() -> Self {
        SynthHomographyConfig {
            num_planes: 2,
            points_per_plane: 90,
            noise: 0.002,
            outlier_fraction: 0.3,
        }
    }
}

/// Largest condition number accepted for generated homographies.
pub const MAX_CONDITION: f64 = 10.0;

fn random_homography<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let h: Matrix3<f64> = Matrix3::new(
            1.0 + rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.25..0.25),
            1.0 + rng.random_range(-0.25..0.25),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
            1.0,
        );
        let sv = h.singular_values();
        let cond = sv.max() / sv.min();
        if cond.is_finite() && cond < MAX_CONDITION {
            return h;
        }
    }
}

fn transfer(h: &Matrix3<f64>, p: Vector2<f64>) -> Option<Vector2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    (q.z.abs() > 0.1).then(|| Vector2::new(q.x / q.z, q.y / q.z))
}

/// Correspondences in `[-1, 1]²` induced by random homographies, each plane
/// occupying a random rectangle of the first image, plus uniformly random
/// mismatches. The outlier count is `floor(f · total)`.
pub fn generate_homography_scene(config: &SynthHomographyConfig, seed: u64) -> Result<Scene> {
    if config.num_planes == 0 || config.points_per_plane < 4 {
        return Err(ConsacError::InvalidParameter(
            "need at least one plane with four points".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.outlier_fraction) || !(config.noise >= 0.0) {
        return Err(ConsacError::InvalidParameter("invalid noise or outlier fraction".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise).map_err(|e| ConsacError::InvalidParameter(e.to_string()))?;
    let mut points: Vec<(Observation, i64)> = Vec::new();
    let mut models = Vec::with_capacity(config.num_planes);
    for j in 0..config.num_planes {
        let h = random_homography(&mut rng);
        models.push(ModelInstance::homography(h)?);
        let w = rng.random_range(0.6..1.2);
        let ht = rng.random_range(0.6..1.2);
        let cx = rng.random_range(-1.0 + w / 2.0..1.0 - w / 2.0);
        let cy = rng.random_range(-1.0 + ht / 2.0..1.0 - ht / 2.0);
        let mut placed = 0;
        while placed < config.points_per_plane {
            let p = Vector2::new(
                cx + rng.random_range(-w / 2.0..w / 2.0),
                cy + rng.random_range(-ht / 2.0..ht / 2.0),
            );
            let Some(q) = transfer(&h, p) else { continue };
            let q = if config.noise > 0.0 {
                Vector2::new(q.x + noise.sample(&mut rng), q.y + noise.sample(&mut rng))
            } else {
                q
            };
            points.push((Observation::pair(p.x, p.y, q.x, q.y), j as i64));
            placed += 1;
        }
    }
    let n_in = points.len() as f64;
    let f = config.outlier_fraction;
    let n_out = (f * n_in / (1.0 - f) + 1e-9).floor() as usize;
    for _ in 0..n_out {
        let o = Observation::pair(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        points.push((o, -1));
    }
    points.shuffle(&mut rng);
    let (observations, labels): (Vec<_>, Vec<_>) = points.into_iter().unzip();
    Ok(Scene {
        kind: ModelKind::Homography,
        observations,
        gt_labels: Some(labels),
        gt_models: Some(models),
        intrinsics: None,
        image_size: None,
    })
}

/// Axis flips, per-axis scaling and shifting applied to both images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip_x: bool,
    pub flip_y: bool,
    pub scale: [f64; 2],
    pub shift: [f64; 2],
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip_x: false,
        flip_y: false,
        scale: [1.0, 1.0],
        shift: [0.0, 0.0],
    };

    /// Flips with probability 1/2 each, scale within ±10 %, shift within
    /// ±10 % of the `[-1, 1]` image extent.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augmentation {
            flip_x: rng.random_bool(0.5),
            flip_y: rng.random_bool(0.5),
            scale: [rng.random_range(0.9..1.1), rng.random_range(0.9..1.1)],
            shift: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let fx = if self.flip_x { -1.0 } else { 1.0 };
        let fy = if self.flip_y { -1.0 } else { 1.0 };
        Matrix3::new(
            self.scale[0] * fx,
            0.0,
            self.shift[0],
            0.0,
            self.scale[1] * fy,
            self.shift[1],
            0.0,
            0.0,
            1.0,
        )
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = if self.flip_x { -x } else { x };
        let fy = if self.flip_y { -y } else { y };
        (self.scale[0] * fx + self.shift[0], self.scale[1] * fy + self.shift[1])
    }
}

/// Applies `aug` to both images of a correspondence scene and conjugates the
/// ground-truth homographies so labels stay exact.
pub fn augment_with(scene: &Scene, aug: &Augmentation) -> Result<Scene> {
    if scene.kind != ModelKind::Homography {
        return Err(ConsacError::InvalidParameter(
            "augmentation applies to correspondence scenes".into(),
        ));
    }
    let observations = scene
        .observations
        .iter()
        .map(|o| {
            let c = o.coords();
            let (x1, y1) = aug.apply(c[0], c[1]);
            let (x2, y2) = aug.apply(c[2], c[3]);
            Observation::pair(x1, y1, x2, y2)
        })
        .collect();
    let a = aug.matrix();
    let a_inv = a.try_inverse().ok_or(ConsacError::SingularModel { det: 0.0 })?;
    let gt_models = match &scene.gt_models {
        Some(models) => Some(
            models
                .iter()
                .map(|m| match m {
                    ModelInstance::Homography(h) => ModelInstance::homography(a * h.matrix() * a_inv),
                    other => Ok(*other),
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(Scene {
        observations,
        gt_models,
        ..scene.clone()
    })
}

pub fn augment_correspondences<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Result<Scene> {
    augment_with(scene, &Augmentation::random(rng))
}

/// Draws a group uniformly first, then an item uniformly within the group.
#[derive(Debug, Clone)]
pub struct RebalancedSampler {
    groups: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl RebalancedSampler {
    /// `groups[g]` lists dataset indices belonging to group `g`. Empty
    /// groups are ignored.
    pub fn new(groups: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        let groups: Vec<Vec<usize>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
        if groups.is_empty() {
            return Err(ConsacError::EmptyGroup);
        }
        Ok(RebalancedSampler {
            groups,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Groups by a key per dataset item, in first-appearance order.
    pub fn from_keys<K: PartialEq>(keys: &[K], seed: u64) -> Result<Self> {
        let mut distinct: Vec<&K> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            match distinct.iter().position(|d| *d == k) {
                Some(g) => groups[g].push(i),
                None => {
                    distinct.push(k);
                    groups.push(vec![i]);
                }
            }
        }
        Self::new(groups, seed)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Returns `(group, dataset index)`.
    pub fn draw(&mut self) -> (usize, usize) {
        let g = self.rng.random_range(0..self.groups.len());
        let items = &self.groups[g];
        (g, items[self.rng.random_range(0..items.len())])
    }
}

impl Iterator for RebalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.draw().1)
    }
}

/// Matches with a descriptor ratio above this are dropped on import.
pub const MAX_MATCH_RATIO: f64 = 0.9;

/// Parses `x1 y1 x2 y2 [ratio]` lines (whitespace or comma separated,
/// `#` comments). Matches whose ratio exceeds [`MAX_MATCH_RATIO`] are
/// dropped.
pub fn parse_correspondences(text: &str) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ConsacError::format(format!("line {}", n + 1), e.to_string()))?;
        let (coords, ratio) = match fields.len() {
            4 => (&fields[..4], None),
            5 => (&fields[..4], Some(fields[4])),
            k => {
                return Err(ConsacError::format(
                    format!("line {}", n + 1),
                    format!("expected 4 or 5 numbers, found {k}"),
                ))
            }
        };
        if ratio.is_some_and(|r| r > MAX_MATCH_RATIO) {
            continue;
        }
        out.push(
            Observation::from_slice(coords)
                .map_err(|e| ConsacError::format(format!("line {}", n + 1), e.to_string()))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDocument {
    version: u32,
    kind: ModelKind,
    observations: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_labels: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_models: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_size: Option<[u32; 2]>,
}

pub fn scene_to_json(scene: &Scene) -> String {
    let doc = SceneDocument {
        version: SCENE_VERSION,
        kind: scene.kind,
        observations: scene.observations.iter().map(|o| o.coords().to_vec()).collect(),
        gt_labels: scene.gt_labels.clone(),
        gt_models: scene
            .gt_models
            .as_ref()
            .map(|ms| ms.iter().map(|m| m.params()).collect()),
        intrinsics: scene.intrinsics.map(|k| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[3 * r + c] = k[(r, c)];
                }
            }
            out
        }),
        image_size: scene.image_size.map(|(w, h)| [w, h]),
    };
    serde_json::to_string(&doc).expect("scene serializes")
}

pub fn scene_from_json(text: &str) -> Result<Scene> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| ConsacError::format(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCENE_VERSION as u64 => {}
        Some(v) => {
            return Err(ConsacError::Version {
                expected: SCENE_VERSION,
                found: v.min(u32::MAX as u64) as u32,
            })
        }
        None => return Err(ConsacError::format("version", "missing or not an integer")),
    }
    let doc: SceneDocument = serde_path_to_error::deserialize(value)
        .map_err(|e| ConsacError::format(e.path().to_string(), e.inner().to_string()))?;
    let observations = doc
        .observations
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Observation::from_slice(c).map_err(|e| ConsacError::format(format!("observations[{i}]"), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let gt_models = match doc.gt_models {
        Some(ms) => Some(
            ms.iter()
                .enumerate()
                .map(|(i, p)| {
                    ModelInstance::from_params(doc.kind, p)
                        .map_err(|e| ConsacError::format(format!("gt_models[{i}]"), e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let scene = Scene {
        kind: doc.kind,
        observations,
        gt_labels: doc.gt_labels,
        gt_models,
        intrinsics: doc.intrinsics.map(|k| Matrix3::from_row_slice(&k)),
        image_size: doc.image_size.map(|[w, h]| (w, h)),
    };
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_json(scene)).map_err(|e| ConsacError::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| ConsacError::io(path, e))?;
    scene_from_json(&text)
}
