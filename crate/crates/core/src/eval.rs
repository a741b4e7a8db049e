//! Matching and evaluation metrics.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ConsacError, Result};
use crate::data::Scene;
use crate::geometry::{ModelInstance, ModelKind, Observation};

/// Pairwise errors, rows = estimates, columns = ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ConsacError::ShapeMismatch(format!(
                "{rows}x{cols} cost matrix with {} entries",
                data.len()
            )));
        }
        if data.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(ConsacError::InvalidParameter(
                "costs must be finite and nonnegative".into(),
            ));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn transposed(&self) -> CostMatrix {
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            data: (0..self.cols)
                .flat_map(|c| (0..self.rows).map(move |r| (r, c)))
                .map(|(r, c)| self.get(r, c))
                .collect(),
        }
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs. Returns `(row, col)`
/// pairs sorted by row and the total cost.
pub fn hungarian_assign(cost: &CostMatrix) -> Result<(Vec<(usize, usize)>, f64)> {
    if cost.rows == 0 || cost.cols == 0 {
        return Err(ConsacError::EmptyMatrix);
    }
    if cost.rows > cost.cols {
        let (pairs, _) = hungarian_assign(&cost.transposed())?;
        let mut pairs: Vec<_> = pairs.into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        let total = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
        return Ok((pairs, total));
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let (n, m) = (cost.rows, cost.cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Ok((pairs, total))
}

/// Angle in degrees between the 3D directions `K⁻¹v` and `K⁻¹v̂`, folded
/// into `[0°, 90°]`.
pub fn vp_angle_error(v: &Vector3<f64>, v_hat: &Vector3<f64>, intrinsics: &Matrix3<f64>) -> Result<f64> {
    let k_inv = intrinsics.try_inverse().ok_or(ConsacError::SingularIntrinsics)?;
    if !k_inv.iter().all(|x| x.is_finite()) {
        return Err(ConsacError::SingularIntrinsics);
    }
    let d1 = k_inv * v;
    let d2 = k_inv * v_hat;
    let (n1, n2) = (d1.norm(), d2.norm());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(ConsacError::InvalidParameter("vanishing point is zero".into()));
    }
    let (d1, d2) = (d1 / n1, d2 / n2);
    let cos = d1.dot(&d2).abs();
    let sin = d1.cross(&d2).norm();
    Ok(sin.atan2(cos).to_degrees())
}

/// Area under the recall curve up to `cutoff`, normalized by `cutoff`.
/// Unmatched ground truth should be passed as `f64::INFINITY`.
pub fn auc_recall(errors: &[f64], cutoff: f64) -> f64 {
    if errors.is_empty() || cutoff <= 0.0 {
        return 0.0;
    }
    let n = errors.len() as f64;
    let mut sorted: Vec<f64> = errors.iter().map(|e| if e.is_nan() { f64::INFINITY } else { *e }).collect();
    sorted.sort_by(f64::total_cmp);
    let mut points = vec![(0.0, 0.0)];
    for (i, &e) in sorted.iter().enumerate() {
        if e > cutoff {
            break;
        }
        points.push((e, (i + 1) as f64 / n));
    }
    let last = points.last().expect("nonempty").1;
    points.push((cutoff, last));
    let area: f64 = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    (area / cutoff).clamp(0.0, 1.0)
}

/// Nearest model with residual below `theta`, or `None` for outliers.
pub fn assign_labels(models: &[ModelInstance], observations: &[Observation], theta: f64) -> Vec<Option<usize>> {
    observations
        .iter()
        .map(|y| {
            let mut best: Option<(usize, f64)> = None;
            for (j, m) in models.iter().enumerate() {
                let r = m.residual(y);
                if r < theta && best.is_none_or(|(_, b)| r < b) {
                    best = Some((j, r));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect()
}

/// Percentage of observations whose predicted cluster disagrees with the
/// ground truth after optimally matching clusters. Negative labels mark
/// outliers; the outlier class is matched to itself.
pub fn misclassification_error(
    models: &[ModelInstance],
    observations: &[Observation],
    gt_labels: &[i64],
    theta: f64,
) -> Result<f64> {
    if gt_labels.len() != observations.len() {
        return Err(ConsacError::ShapeMismatch(format!(
            "{} labels for {} observations",
            gt_labels.len(),
            observations.len()
        )));
    }
    if observations.is_empty() {
        return Ok(0.0);
    }
    let predicted = assign_labels(models, observations, theta);
    let predicted: Vec<i64> = predicted.iter().map(|p| p.map_or(-1, |j| j as i64)).collect();
    Ok(clustering_error(&predicted, gt_labels))
}

/// Misclassification percentage between two labelings, negative = outlier.
pub fn clustering_error(predicted: &[i64], gt: &[i64]) -> f64 {
    let mut gt_ids: Vec<i64> = gt.iter().copied().filter(|&l| l >= 0).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    let mut pred_ids: Vec<i64> = predicted.iter().copied().filter(|&l| l >= 0).collect();
    pred_ids.sort_unstable();
    pred_ids.dedup();
    let mut overlap = vec![0usize; pred_ids.len() * gt_ids.len()];
    let mut correct = 0usize;
    for (&p, &g) in predicted.iter().zip(gt) {
        match (p >= 0, g >= 0) {
            (false, false) => correct += 1,
            (true, true) => {
                let r = pred_ids.binary_search(&p).expect("collected");
                let c = gt_ids.binary_search(&g).expect("collected");
                overlap[r * gt_ids.len() + c] += 1;
            }
            _ => {}
        }
    }
    if !pred_ids.is_empty() && !gt_ids.is_empty() {
        let max = *overlap.iter().max().unwrap_or(&0) as f64;
        let cost = CostMatrix::from_fn(pred_ids.len(), gt_ids.len(), |r, c| {
            max - overlap[r * gt_ids.len() + c] as f64
        })
        .expect("finite costs");
        let (pairs, _) = hungarian_assign(&cost).expect("nonempty");
        correct += pairs
            .iter()
            .map(|&(r, c)| overlap[r * gt_ids.len() + c])
            .sum::<usize>();
    }
    100.0 * (predicted.len() - correct) as f64 / predicted.len() as f64
}

/// Number of Hungarian-matched pairs with error below `threshold`.
pub fn matched_below(cost: &CostMatrix, threshold: f64) -> usize {
    match hungarian_assign(cost) {
        Ok((pairs, _)) => pairs.iter().filter(|&&(r, c)| cost.get(r, c) < threshold).count(),
        Err(_) => 0,
    }
}

/// F1 score of estimated against ground-truth instances given their
/// pairwise errors.
pub fn f1_instances(cost: &CostMatrix, threshold: f64) -> f64 {
    let (n_est, n_gt) = (cost.rows(), cost.cols());
    let matched = matched_below(cost, threshold);
    if matched == 0 || n_est == 0 || n_gt == 0 {
        return 0.0;
    }
    let precision = matched as f64 / n_est as f64;
    let recall = matched as f64 / n_gt as f64;
    2.0 * precision * recall / (precision + recall)
}

/// A ground-truth line segment, given by its endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl Segment {
    /// Extent of the labeled points of a line, projected onto it.
    pub fn from_support(line: &Vector3<f64>, points: &[Observation]) -> Option<Segment> {
        let normal = Vector2::new(line.x, line.y);
        let n2 = normal.norm_squared();
        if n2 == 0.0 || points.is_empty() {
            return None;
        }
        let foot = -normal * line.z / n2;
        let dir = Vector2::new(-normal.y, normal.x) / n2.sqrt();
        let ts = points.iter().map(|p| (p.first().xy() - foot).dot(&dir));
        let (lo, hi) = ts.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
        let a = foot + dir * lo;
        let b = foot + dir * hi;
        Some(Segment {
            a: [a.x, a.y],
            b: [b.x, b.y],
        })
    }
}

/// Larger distance of the two segment endpoints to an estimated line.
pub fn line_pair_error(estimate: &ModelInstance, gt: &Segment) -> f64 {
    let a = Observation::point(gt.a[0], gt.a[1]);
    let b = Observation::point(gt.b[0], gt.b[1]);
    estimate.residual(&a).max(estimate.residual(&b))
}

/// Default F1 match threshold for lines: larger endpoint distance.
pub const LINE_MATCH_THRESHOLD: f64 = 1e-2;
/// Default F1 match threshold for vanishing points, in degrees.
pub const VP_MATCH_THRESHOLD_DEG: f64 = 1.0;

/// Pairwise errors between estimates (rows) and the scene's ground-truth
/// instances (columns): endpoint distance for lines, angle in degrees for
/// vanishing points, mean transfer residual over the labeled inliers for
/// homographies.
pub fn scene_cost(scene: &Scene, models: &[ModelInstance]) -> Result<CostMatrix> {
    let gt = scene
        .gt_models
        .as_ref()
        .ok_or_else(|| ConsacError::InvalidParameter("scene has no ground-truth models".into()))?;
    if models.is_empty() || gt.is_empty() {
        return Err(ConsacError::EmptyMatrix);
    }
    match scene.kind {
        ModelKind::Line => {
            let segments: Vec<Option<Segment>> = gt
                .iter()
                .enumerate()
                .map(|(j, m)| m.as_line().and_then(|l| Segment::from_support(l, &scene.support(j))))
                .collect();
            CostMatrix::from_fn(models.len(), gt.len(), |r, c| match &segments[c] {
                Some(seg) => finite_or_max(line_pair_error(&models[r], seg)),
                None => f64::MAX,
            })
        }
        ModelKind::VanishingPoint => {
            let k = scene.intrinsics.unwrap_or_else(Matrix3::identity);
            let mut data = Vec::with_capacity(models.len() * gt.len());
            for m in models {
                for g in gt {
                    let e = match (m.as_vanishing_point(), g.as_vanishing_point()) {
                        (Some(v_hat), Some(v)) => vp_angle_error(v, v_hat, &k)?,
                        _ => 90.0,
                    };
                    data.push(e);
                }
            }
            CostMatrix::new(models.len(), gt.len(), data)
        }
        ModelKind::Homography => {
            let supports: Vec<Vec<Observation>> = (0..gt.len()).map(|j| scene.support(j)).collect();
            CostMatrix::from_fn(models.len(), gt.len(), |r, c| {
                let s = &supports[c];
                if s.is_empty() {
                    return f64::MAX;
                }
                finite_or_max(s.iter().map(|y| models[r].residual(y)).sum::<f64>() / s.len() as f64)
            })
        }
    }
}

fn finite_or_max(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::MAX
    }
}

/// Instance-level F1 of `models` on a scene; no estimates scores zero.
pub fn scene_f1(scene: &Scene, models: &[ModelInstance], threshold: f64) -> Result<f64> {
    if models.is_empty() {
        return Ok(0.0);
    }
    Ok(f1_instances(&scene_cost(scene, models)?, threshold))
}

/// Angular error of every ground-truth vanishing point after matching,
/// infinite when unmatched.
pub fn scene_vp_errors(scene: &Scene, models: &[ModelInstance]) -> Result<Vec<f64>> {
    let g = scene.gt_models.as_ref().map_or(0, Vec::len);
    let mut errors = vec![f64::INFINITY; g];
    if models.is_empty() || g == 0 {
        return Ok(errors);
    }
    let cost = scene_cost(scene, models)?;
    for (r, c) in hungarian_assign(&cost)?.0 {
        errors[c] = cost.get(r, c);
    }
    Ok(errors)
}

/// Misclassification error of `models` against the scene's labels.
pub fn scene_me(scene: &Scene, models: &[ModelInstance], theta: f64) -> Result<f64> {
    let labels = scene
        .gt_labels
        .as_ref()
        .ok_or_else(|| ConsacError::InvalidParameter("scene has no ground-truth labels".into()))?;
    misclassification_error(models, &scene.observations, labels, theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and population standard deviation.
pub fn summarize(values: &[f64]) -> Summary {
    let count = values.len();
    if count == 0 {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
            count,
        };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    Summary {
        mean,
        std: var.sqrt(),
        count,
    }
}
