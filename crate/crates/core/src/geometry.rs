//! Model classes: minimal solvers, residuals and weighted refits for 2D lines,
//! vanishing points and plane homographies.
//!
//! All coordinates are normalized image coordinates. Lines and vanishing
//! points are homogeneous 3-vectors, homographies are 3x3 matrices stored
//! together with their inverse so residual evaluation stays cheap.

use nalgebra::{Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ConsacError, Result};

/// Coincidence / collinearity threshold used by the minimal solvers.
pub const DEGENERACY_EPS: f64 = 1e-12;
/// Ratio of smallest non-null to largest singular value of the DLT design
/// matrix below which a homography minimal set is rejected.
pub const DLT_CONDITION_EPS: f64 = 1e-10;

/// A single observation: a 2D point (`dim == 2`) or a pair of 2D points
/// (`dim == 4`, a line segment or a point correspondence).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    coords: [f64; 4],
    dim: u8,
}

impl Observation {
    pub fn point(x: f64, y: f64) -> Self {
        Observation {
            coords: [x, y, 0.0, 0.0],
            dim: 2,
        }
    }

    /// Segment endpoints or a correspondence `(x1, y1) -> (x2, y2)`.
    pub fn pair(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Observation {
            coords: [x1, y1, x2, y2],
            dim: 4,
        }
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(ConsacError::InvalidParameter(
                "observation coordinates must be finite".into(),
            ));
        }
        match *coords {
            [x, y] => Ok(Self::point(x, y)),
            [x1, y1, x2, y2] => Ok(Self::pair(x1, y1, x2, y2)),
            _ => Err(ConsacError::ShapeMismatch(format!(
                "observations have 2 or 4 coordinates, got {}",
                coords.len()
            ))),
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords[..self.dim as usize]
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    /// First point in homogeneous coordinates.
    pub fn first(&self) -> Vector3<f64> {
        Vector3::new(self.coords[0], self.coords[1], 1.0)
    }

    /// Second point in homogeneous coordinates (pair observations only).
    pub fn second(&self) -> Vector3<f64> {
        Vector3::new(self.coords[2], self.coords[3], 1.0)
    }

    /// The same observation with its two points exchanged.
    pub fn swapped(&self) -> Self {
        match self.dim {
            4 => Self::pair(self.coords[2], self.coords[3], self.coords[0], self.coords[1]),
            _ => *self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Line,
    #[serde(rename = "vp")]
    VanishingPoint,
    Homography,
}

impl ModelKind {
    /// Minimal set size `C`.
    pub fn minimal_set_size(self) -> usize {
        match self {
            ModelKind::Line | ModelKind::VanishingPoint => 2,
            ModelKind::Homography => 4,
        }
    }

    /// Number of coordinates per observation.
    pub fn observation_dim(self) -> usize {
        match self {
            ModelKind::Line => 2,
            ModelKind::VanishingPoint | ModelKind::Homography => 4,
        }
    }

    /// Number of parameters in the flat parameter representation.
    pub fn param_len(self) -> usize {
        match self {
            ModelKind::Line | ModelKind::VanishingPoint => 3,
            ModelKind::Homography => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Line => "line",
            ModelKind::VanishingPoint => "vp",
            ModelKind::Homography => "homography",
        }
    }

    /// Runs the minimal solver of this model class on `sample`.
    pub fn fit_minimal(self, sample: &[Observation]) -> Result<ModelInstance> {
        let c = self.minimal_set_size();
        if sample.len() != c {
            return Err(ConsacError::ShapeMismatch(format!(
                "{} minimal set needs {c} observations, got {}",
                self.name(),
                sample.len()
            )));
        }
        match self {
            ModelKind::Line => fit_line_minimal(&sample[0], &sample[1]),
            ModelKind::VanishingPoint => fit_vp_minimal(&sample[0], &sample[1]),
            ModelKind::Homography => {
                fit_homography_minimal(&[sample[0], sample[1], sample[2], sample[3]])
            }
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ConsacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" | "lines" => Ok(ModelKind::Line),
            "vp" | "vps" | "vanishing-point" => Ok(ModelKind::VanishingPoint),
            "homography" | "homographies" => Ok(ModelKind::Homography),
            other => Err(ConsacError::InvalidParameter(format!(
                "unknown model kind `{other}`"
            ))),
        }
    }
}

/// Divisor that normalizes a vector of norm `n`. Input that is already
/// normalized up to rounding is kept bit for bit, so parameters survive a
/// save and load unchanged.
fn unit_scale(n: f64) -> f64 {
    if (n - 1.0).abs() <= 1e-12 {
        1.0
    } else {
        n
    }
}

/// A plane homography with its cached inverse. Both are scaled to unit
/// Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        let norm = matrix.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(ConsacError::SingularModel { det: 0.0 });
        }
        let mut matrix = matrix / unit_scale(norm);
        if matrix[(2, 2)] < 0.0 {
            matrix = -matrix;
        }
        let det = matrix.determinant();
        if det.abs() < DEGENERACY_EPS {
            return Err(ConsacError::SingularModel { det });
        }
        let inverse = matrix
            .try_inverse()
            .ok_or(ConsacError::SingularModel { det })?;
        Ok(Homography {
            matrix,
            inverse: inverse / inverse.norm(),
        })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.inverse
    }

    /// The homography mapping the second image onto the first.
    pub fn inverted(&self) -> Homography {
        Homography {
            matrix: self.inverse,
            inverse: self.matrix,
        }
    }
}

/// Parameters of one fitted model instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelInstance {
    /// `(n1, n2, d)` with `n1² + n2² = 1`.
    Line(Vector3<f64>),
    /// Homogeneous vanishing point, unit norm.
    VanishingPoint(Vector3<f64>),
    Homography(Homography),
}

impl ModelInstance {
    /// Builds a line from an arbitrary homogeneous vector, normalizing its
    /// normal part.
    pub fn line(params: Vector3<f64>) -> Result<Self> {
        let n = params.xy().norm();
        if !n.is_finite() || n < DEGENERACY_EPS {
            return Err(ConsacError::DegenerateMinimalSet("line normal vanishes"));
        }
        Ok(ModelInstance::Line(params / unit_scale(n)))
    }

    pub fn vanishing_point(params: Vector3<f64>) -> Result<Self> {
        let n = params.norm();
        if !n.is_finite() || n < DEGENERACY_EPS {
            return Err(ConsacError::DegenerateMinimalSet("vanishing point vanishes"));
        }
        Ok(ModelInstance::VanishingPoint(params / unit_scale(n)))
    }

    pub fn homography(matrix: Matrix3<f64>) -> Result<Self> {
        Homography::new(matrix).map(ModelInstance::Homography)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelInstance::Line(_) => ModelKind::Line,
            ModelInstance::VanishingPoint(_) => ModelKind::VanishingPoint,
            ModelInstance::Homography(_) => ModelKind::Homography,
        }
    }

    /// Flat parameters: 3 values for lines and VPs, 9 row-major values for
    /// homographies.
    pub fn params(&self) -> Vec<f64> {
        match self {
            ModelInstance::Line(v) | ModelInstance::VanishingPoint(v) => v.iter().copied().collect(),
            ModelInstance::Homography(h) => {
                let m = h.matrix();
                (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect()
            }
        }
    }

    pub fn from_params(kind: ModelKind, params: &[f64]) -> Result<Self> {
        if params.len() != kind.param_len() {
            return Err(ConsacError::ShapeMismatch(format!(
                "{} parameters have length {}, got {}",
                kind.name(),
                kind.param_len(),
                params.len()
            )));
        }
        match kind {
            ModelKind::Line => Self::line(Vector3::from_column_slice(params)),
            ModelKind::VanishingPoint => Self::vanishing_point(Vector3::from_column_slice(params)),
            ModelKind::Homography => Self::homography(Matrix3::from_row_slice(params)),
        }
    }

    pub fn residual(&self, y: &Observation) -> f64 {
        match self {
            ModelInstance::Line(h) => line_residual(y, h),
            ModelInstance::VanishingPoint(v) => vp_residual(y, v),
            ModelInstance::Homography(h) => homography_residual(y, h),
        }
    }

    pub fn as_line(&self) -> Option<&Vector3<f64>> {
        match self {
            ModelInstance::Line(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_vanishing_point(&self) -> Option<&Vector3<f64>> {
        match self {
            ModelInstance::VanishingPoint(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_homography(&self) -> Option<&Homography> {
        match self {
            ModelInstance::Homography(h) => Some(h),
            _ => None,
        }
    }
}

/// Line through two points with unit-norm normal.
pub fn fit_line_minimal(p1: &Observation, p2: &Observation) -> Result<ModelInstance> {
    let (a, b) = (p1.first(), p2.first());
    if (a - b).xy().norm() < DEGENERACY_EPS {
        return Err(ConsacError::DegenerateMinimalSet("coincident points"));
    }
    ModelInstance::line(a.cross(&b))
}

/// Absolute point-to-line distance `|yᵀh|` for a normalized line.
pub fn line_residual(y: &Observation, h: &Vector3<f64>) -> f64 {
    y.first().dot(h).abs()
}

fn segment_line(s: &Observation) -> Vector3<f64> {
    s.first().cross(&s.second())
}

/// Intersection of the lines supporting two segments. Parallel segments give
/// a point at infinity, which is a valid vanishing point.
pub fn fit_vp_minimal(s1: &Observation, s2: &Observation) -> Result<ModelInstance> {
    let l1 = segment_line(s1);
    let l2 = segment_line(s2);
    let (n1, n2) = (l1.norm(), l2.norm());
    if n1 < DEGENERACY_EPS || n2 < DEGENERACY_EPS {
        return Err(ConsacError::DegenerateMinimalSet("segment endpoints coincide"));
    }
    let v = (l1 / n1).cross(&(l2 / n2));
    if v.norm() < DEGENERACY_EPS {
        return Err(ConsacError::DegenerateMinimalSet("segments lie on one line"));
    }
    ModelInstance::vanishing_point(v)
}

/// `1 - |cos α|` between a segment and the line joining its midpoint with the
/// vanishing point. Returns 1 when that line is undefined (the vanishing
/// point sits on the midpoint).
pub fn vp_residual(y: &Observation, v: &Vector3<f64>) -> f64 {
    let p1 = y.first();
    let p2 = y.second();
    let ly = p1.cross(&p2);
    let centre = (p1 + p2) * 0.5;
    let lc = v.cross(&centre);
    let ny = ly.xy().norm();
    let nc = lc.xy().norm();
    if ny == 0.0 || nc <= DEGENERACY_EPS * v.norm() * centre.norm() {
        return 1.0;
    }
    let cos = (ly.xy().dot(&lc.xy())).abs() / (ny * nc);
    (1.0 - cos).clamp(0.0, 1.0)
}

fn dehomogenize(p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(p.x / p.z, p.y / p.z)
}

/// Symmetric squared transfer error of a correspondence under `h`.
pub fn homography_residual(y: &Observation, h: &Homography) -> f64 {
    let p1 = y.first();
    let p2 = y.second();
    let fwd = h.matrix() * p1;
    let bwd = h.inverse() * p2;
    if fwd.z == 0.0 || bwd.z == 0.0 {
        return f64::INFINITY;
    }
    let e2 = (p2.xy() - dehomogenize(&fwd)).norm_squared();
    let e1 = (p1.xy() - dehomogenize(&bwd)).norm_squared();
    let r = e1 + e2;
    if r.is_nan() {
        f64::INFINITY
    } else {
        r
    }
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normalizing_transform(points: &[Vector2<f64>], weights: Option<&[f64]>) -> Matrix3<f64> {
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..points.len()).map(w).sum();
    let centroid = points
        .iter()
        .enumerate()
        .fold(Vector2::zeros(), |acc, (i, p)| acc + p * w(i))
        / total;
    let mean_dist = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p - centroid).norm() * w(i))
        .sum::<f64>()
        / total;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0)
}

fn transform_point(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    dehomogenize(&(t * Vector3::new(p.x, p.y, 1.0)))
}

fn dlt_rows(a: &Vector2<f64>, b: &Vector2<f64>) -> [[f64; 9]; 2] {
    let (x, y, u, v) = (a.x, a.y, b.x, b.y);
    [
        [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u],
        [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
    ]
}

fn has_collinear_triple(points: &[Vector2<f64>; 4]) -> bool {
    for i in 0..4 {
        for j in (i + 1)..4 {
            for k in (j + 1)..4 {
                let d1 = points[j] - points[i];
                let d2 = points[k] - points[i];
                if (d1.x * d2.y - d1.y * d2.x).abs() < DEGENERACY_EPS {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalized four-point DLT.
pub fn fit_homography_minimal(c: &[Observation; 4]) -> Result<ModelInstance> {
    let src: Vec<Vector2<f64>> = c.iter().map(|o| o.first().xy()).collect();
    let dst: Vec<Vector2<f64>> = c.iter().map(|o| o.second().xy()).collect();
    let t1 = normalizing_transform(&src, None);
    let t2 = normalizing_transform(&dst, None);
    let ns: [Vector2<f64>; 4] = std::array::from_fn(|i| transform_point(&t1, &src[i]));
    let nd: [Vector2<f64>; 4] = std::array::from_fn(|i| transform_point(&t2, &dst[i]));
    if has_collinear_triple(&ns) || has_collinear_triple(&nd) {
        return Err(ConsacError::DegenerateMinimalSet("three collinear points"));
    }

    // 8x9 design matrix padded with a zero row so the SVD yields the full
    // right null space.
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..4 {
        let rows = dlt_rows(&ns[i], &nd[i]);
        for (r, row) in rows.iter().enumerate() {
            for (col, &val) in row.iter().enumerate() {
                a[(2 * i + r, col)] = val;
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or(ConsacError::DegenerateMinimalSet("svd failed"))?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[7]];
    if largest <= 0.0 || second_smallest / largest < DLT_CONDITION_EPS {
        return Err(ConsacError::DegenerateMinimalSet("rank-deficient design matrix"));
    }
    let null = v_t.row(order[8]);
    let hn = Matrix3::from_row_slice(null.transpose().as_slice());
    let t2_inv = t2
        .try_inverse()
        .ok_or(ConsacError::DegenerateMinimalSet("normalization failed"))?;
    ModelInstance::homography(t2_inv * hn * t1)
        .map_err(|_| ConsacError::DegenerateMinimalSet("singular homography"))
}

fn weighted_squared_residual(
    model: &ModelInstance,
    observations: &[Observation],
    weights: &[f64],
) -> f64 {
    observations
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(y, &w)| {
            let r = model.residual(y);
            w * r * r
        })
        .sum()
}

/// Weighted least-squares refit used as the EM M-step.
///
/// Lines get the exact weighted total-least-squares solution. Vanishing
/// points and homographies get a linear refit; when `current` is given and
/// the refit increases `Σ wᵢ r²` by more than 1e-9, `current` is returned.
pub fn weighted_refit(
    kind: ModelKind,
    observations: &[Observation],
    weights: &[f64],
    current: Option<&ModelInstance>,
) -> Result<ModelInstance> {
    if observations.len() != weights.len() {
        return Err(ConsacError::ShapeMismatch(format!(
            "{} observations but {} weights",
            observations.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ConsacError::InvalidParameter(
            "refit weights must be finite and nonnegative".into(),
        ));
    }
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    let required = kind.minimal_set_size();
    if positive < required {
        return Err(ConsacError::InsufficientSupport { positive, required });
    }
    let refit = match kind {
        ModelKind::Line => return refit_line(observations, weights),
        ModelKind::VanishingPoint => refit_vp(observations, weights),
        ModelKind::Homography => refit_homography(observations, weights),
    };
    match (refit, current) {
        (Ok(new), Some(cur)) => {
            let before = weighted_squared_residual(cur, observations, weights);
            let after = weighted_squared_residual(&new, observations, weights);
            if after > before + 1e-9 || !after.is_finite() {
                Ok(*cur)
            } else {
                Ok(new)
            }
        }
        (Ok(new), None) => Ok(new),
        (Err(_), Some(cur)) => Ok(*cur),
        (Err(e), None) => Err(e),
    }
}

fn smallest_eigenvector2(m: Matrix2<f64>) -> Vector2<f64> {
    let eig = m.symmetric_eigen();
    let i = if eig.eigenvalues[0] <= eig.eigenvalues[1] { 0 } else { 1 };
    eig.eigenvectors.column(i).into_owned()
}

fn smallest_eigenvector(m: nalgebra::DMatrix<f64>) -> nalgebra::DVector<f64> {
    let eig = m.symmetric_eigen();
    let i = eig.eigenvalues.imin();
    eig.eigenvectors.column(i).into_owned()
}

fn refit_line(observations: &[Observation], weights: &[f64]) -> Result<ModelInstance> {
    let total: f64 = weights.iter().sum();
    let centroid = observations
        .iter()
        .zip(weights)
        .fold(Vector2::zeros(), |acc, (y, &w)| acc + y.first().xy() * w)
        / total;
    let scatter = observations
        .iter()
        .zip(weights)
        .fold(Matrix2::zeros(), |acc, (y, &w)| {
            let d = y.first().xy() - centroid;
            acc + d * d.transpose() * w
        });
    let normal = smallest_eigenvector2(scatter);
    ModelInstance::line(Vector3::new(normal.x, normal.y, -normal.dot(&centroid)))
}

fn refit_vp(observations: &[Observation], weights: &[f64]) -> Result<ModelInstance> {
    let mut m = Matrix3::zeros();
    for (y, &w) in observations.iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        let l = segment_line(y);
        let n = l.norm();
        if n < DEGENERACY_EPS {
            continue;
        }
        let l = l / n;
        m += l * l.transpose() * w;
    }
    let v = smallest_eigenvector(nalgebra::DMatrix::from_column_slice(3, 3, m.as_slice()));
    ModelInstance::vanishing_point(Vector3::from_column_slice(v.as_slice()))
}

fn refit_homography(observations: &[Observation], weights: &[f64]) -> Result<ModelInstance> {
    let src: Vec<Vector2<f64>> = observations.iter().map(|o| o.first().xy()).collect();
    let dst: Vec<Vector2<f64>> = observations.iter().map(|o| o.second().xy()).collect();
    let t1 = normalizing_transform(&src, Some(weights));
    let t2 = normalizing_transform(&dst, Some(weights));
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..observations.len() {
        let w = weights[i];
        if w <= 0.0 {
            continue;
        }
        let a = transform_point(&t1, &src[i]);
        let b = transform_point(&t2, &dst[i]);
        for row in dlt_rows(&a, &b) {
            let r = nalgebra::SVector::<f64, 9>::from_row_slice(&row);
            ata += r * r.transpose() * w;
        }
    }
    let h = smallest_eigenvector(nalgebra::DMatrix::from_column_slice(9, 9, ata.as_slice()));
    let hn = Matrix3::from_row_slice(h.as_slice());
    let t2_inv = t2
        .try_inverse()
        .ok_or(ConsacError::DegenerateMinimalSet("normalization failed"))?;
    ModelInstance::homography(t2_inv * hn * t1)
}
