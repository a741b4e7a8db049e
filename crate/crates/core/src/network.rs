//! Per-observation sampling weight network.
//!
//! Every layer acts on each observation row independently (1x1
//! convolutions), except instance normalization, which normalizes each
//! channel over the observations of one input, and batch normalization,
//! which in training mode normalizes over all rows of a collated batch.
//!
//! ```text
//! x (D+1) -> linear -> relu -> blocks -> linear -> sigmoid -> / sum
//! block:  a -> [linear -> inorm -> bnorm? -> relu] x2 -> + a
//! ```

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConsacError, Result};
use crate::geometry::{ModelKind, Observation};
use crate::sampler::WeightSource;
use crate::scoring::StateVector;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Coordinates per observation; the state adds one more input feature.
    pub input_dim: usize,
    pub channels: usize,
    pub blocks: usize,
    pub batch_norm: bool,
}

impl Architecture {
    /// Full-size network: 128 channels, 6 residual blocks.
    pub fn standard(kind: ModelKind) -> Self {
        Architecture {
            input_dim: kind.observation_dim(),
            channels: 128,
            blocks: 6,
            batch_norm: kind != ModelKind::Homography,
        }
    }

    pub fn features(&self) -> usize {
        self.input_dim + 1
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.channels == 0 {
            return Err(ConsacError::InvalidParameter(
                "network needs a positive input dimension and channel count".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamClass {
    EntryWeight,
    EntryBias,
    HiddenWeight,
    HiddenBias,
    NormScale,
    NormShift,
    ExitWeight,
    ExitBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub class: ParamClass,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StageOffsets {
    weight: usize,
    bias: usize,
    norm: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch normalization uses statistics of the current batch.
    Train,
    /// Batch normalization uses running statistics.
    Eval,
}

/// One network input: a row of coordinates plus state per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput {
    rows: Array2<f64>,
}

impl NetworkInput {
    pub fn new(observations: &[Observation], state: &StateVector) -> Result<Self> {
        if state.len() != observations.len() {
            return Err(ConsacError::ShapeMismatch(format!(
                "state has {} entries for {} observations",
                state.len(),
                observations.len()
            )));
        }
        let dim = observations.first().map_or(0, |o| o.dim());
        let mut rows = Array2::zeros((observations.len(), dim + 1));
        for (i, (o, &s)) in observations.iter().zip(state.entries()).enumerate() {
            if o.dim() != dim {
                return Err(ConsacError::ShapeMismatch(
                    "observations of mixed dimension".into(),
                ));
            }
            for (j, &c) in o.coords().iter().enumerate() {
                rows[(i, j)] = c;
            }
            rows[(i, dim)] = s;
        }
        Ok(NetworkInput { rows })
    }

    pub fn from_rows(rows: Array2<f64>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(ConsacError::InvalidParameter(
                "network input must be finite".into(),
            ));
        }
        Ok(NetworkInput { rows })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Batch statistics of every batch-norm layer from one training-mode pass:
/// mean and unbiased variance per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Array1<f64>>,
    pub var: Vec<Array1<f64>>,
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Array2<f64>,
    normalized: Array2<f64>,
    in_inv_std: Array2<f64>,
    bn: Option<(Array1<f64>, Array1<f64>)>,
    output: Array2<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    segments: Vec<Range<usize>>,
    input: Array2<f64>,
    entry_out: Array2<f64>,
    stages: Vec<StageCache>,
    last: Array2<f64>,
    sigmoid: Array1<f64>,
    sums: Vec<f64>,
}

impl ForwardCache {
    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    /// Sigmoid outputs of input `k` before normalization.
    pub fn sigmoid_outputs(&self, k: usize) -> ArrayView1<'_, f64> {
        self.sigmoid.slice(s![self.segments[k].clone()])
    }

    pub fn output_sum(&self, k: usize) -> f64 {
        self.sums[k]
    }

    /// Sign pattern of every ReLU in the pass.
    #[doc(hidden)]
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.entry_out.iter().map(|&v| v > 0.0).collect();
        for st in &self.stages {
            out.extend(st.output.iter().map(|&v| v > 0.0));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Sampling weights per input, each summing to one.
    pub probs: Vec<Vec<f64>>,
    pub cache: Option<ForwardCache>,
    pub batch_stats: Option<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    layout: Vec<ParamEntry>,
    entry: (usize, usize),
    stage_offsets: Vec<StageOffsets>,
    exit: (usize, usize),
    params: Vec<f64>,
    running_mean: Vec<Array1<f64>>,
    running_var: Vec<Array1<f64>>,
}

fn build_layout(arch: &Architecture) -> (Vec<ParamEntry>, (usize, usize), Vec<StageOffsets>, (usize, usize)) {
    let mut layout = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, class: ParamClass| {
        let e = ParamEntry {
            name,
            shape,
            offset,
            class,
        };
        offset += e.len();
        let o = e.offset;
        layout.push(e);
        o
    };
    let c = arch.channels;
    let entry = (
        push("entry.weight".into(), vec![c, arch.features()], ParamClass::EntryWeight),
        push("entry.bias".into(), vec![c], ParamClass::EntryBias),
    );
    let mut stages = Vec::new();
    for b in 0..arch.blocks {
        for st in 0..2 {
            let p = format!("block{b}.stage{st}");
            let weight = push(format!("{p}.weight"), vec![c, c], ParamClass::HiddenWeight);
            let bias = push(format!("{p}.bias"), vec![c], ParamClass::HiddenBias);
            let norm = arch.batch_norm.then(|| {
                (
                    push(format!("{p}.bn_scale"), vec![c], ParamClass::NormScale),
                    push(format!("{p}.bn_shift"), vec![c], ParamClass::NormShift),
                )
            });
            stages.push(StageOffsets { weight, bias, norm });
        }
    }
    let exit = (
        push("exit.weight".into(), vec![c], ParamClass::ExitWeight),
        push("exit.bias".into(), vec![1], ParamClass::ExitBias),
    );
    (layout, entry, stages, exit)
}

fn architecture_hash(arch: &Architecture, layout: &[ParamEntry]) -> String {
    let mut h = Sha256::new();
    h.update(format!(
        "consac-net/{}/{}/{}/{}",
        arch.input_dim, arch.channels, arch.blocks, arch.batch_norm
    ));
    for e in layout {
        h.update(format!("|{}:{:?}", e.name, e.shape));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-column mean and biased variance.
fn column_moments(x: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let c = x.ncols();
    let n = x.nrows().max(1) as f64;
    let mut mean = vec![0.0; c];
    for row in x.outer_iter() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for row in x.outer_iter() {
        for ((s, &v), &m) in var.iter_mut().zip(row.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (Array1::from(mean), Array1::from(var))
}

/// Normalizes each column in place; returns `1 / sqrt(var + eps)`.
fn normalize_in_place(mut x: ArrayViewMut2<'_, f64>) -> Array1<f64> {
    let (mean, var) = column_moments(x.view());
    let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    for mut row in x.outer_iter_mut() {
        for ((v, &m), &is) in row.iter_mut().zip(mean.iter()).zip(inv_std.iter()) {
            *v = (*v - m) * is;
        }
    }
    inv_std
}

/// Backward pass of column normalization `xhat = (x - mean) · inv_std`
/// with statistics taken over the rows of `dy`, in place.
fn normalize_backward_in_place(mut dy: ArrayViewMut2<'_, f64>, xhat: ArrayView2<'_, f64>, inv_std: ArrayView1<'_, f64>) {
    let (r, c) = dy.dim();
    let n = r.max(1) as f64;
    let mut mean_dy = vec![0.0; c];
    let mut mean_dy_xhat = vec![0.0; c];
    for (d, x) in dy.outer_iter().zip(xhat.outer_iter()) {
        for j in 0..c {
            mean_dy[j] += d[j];
            mean_dy_xhat[j] += d[j] * x[j];
        }
    }
    mean_dy.iter_mut().for_each(|v| *v /= n);
    mean_dy_xhat.iter_mut().for_each(|v| *v /= n);
    for (mut d, x) in dy.outer_iter_mut().zip(xhat.outer_iter()) {
        for j in 0..c {
            d[j] = (d[j] - mean_dy[j] - x[j] * mean_dy_xhat[j]) * inv_std[j];
        }
    }
}

impl Network {
    /// Fan-in scaled uniform initialization; exit bias zero, batch norm
    /// scale one and shift zero.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, entry, stage_offsets, exit) = build_layout(&arch);
        let total = layout.last().map_or(0, |e| e.offset + e.len());
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &layout {
            let fan_in = match e.class {
                ParamClass::EntryWeight | ParamClass::EntryBias => arch.features(),
                ParamClass::HiddenWeight | ParamClass::HiddenBias | ParamClass::ExitWeight => arch.channels,
                ParamClass::NormScale => {
                    params[e.range()].iter_mut().for_each(|p| *p = 1.0);
                    continue;
                }
                ParamClass::NormShift | ParamClass::ExitBias => continue,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[e.range()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        let n_bn = if arch.batch_norm { 2 * arch.blocks } else { 0 };
        Ok(Network {
            arch,
            layout,
            entry,
            stage_offsets,
            exit,
            params,
            running_mean: vec![Array1::zeros(arch.channels); n_bn],
            running_var: vec![Array1::ones(arch.channels); n_bn],
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn running_stats(&self) -> (&[Array1<f64>], &[Array1<f64>]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn hash(&self) -> String {
        architecture_hash(&self.arch, &self.layout)
    }

    fn matrix(&self, offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[offset..offset + rows * cols])
            .expect("layout matches architecture")
    }

    fn vector(&self, offset: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[offset..offset + len])
    }

    /// Sampling weights of one input in evaluation mode.
    pub fn forward(&self, input: &NetworkInput) -> Result<Vec<f64>> {
        let mut out = self.forward_batch(std::slice::from_ref(input), Mode::Eval, false)?;
        Ok(out.probs.swap_remove(0))
    }

    /// Sampling weights for `observations` under `state`.
    pub fn probabilities(&self, observations: &[Observation], state: &StateVector) -> Result<Vec<f64>> {
        self.forward(&NetworkInput::new(observations, state)?)
    }

    /// Forward pass over a collated batch. Running statistics are not
    /// touched; see [`Network::update_running_stats`].
    pub fn forward_batch(&self, inputs: &[NetworkInput], mode: Mode, keep_cache: bool) -> Result<ForwardOutput> {
        let f = self.arch.features();
        let c = self.arch.channels;
        let mut segments = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for inp in inputs {
            if inp.rows.ncols() != f {
                return Err(ConsacError::ShapeMismatch(format!(
                    "network expects {f} features per observation, got {}",
                    inp.rows.ncols()
                )));
            }
            if inp.is_empty() {
                return Err(ConsacError::ShapeMismatch("empty network input".into()));
            }
            segments.push(start..start + inp.len());
            start += inp.len();
        }
        if inputs.is_empty() {
            return Ok(ForwardOutput {
                probs: Vec::new(),
                cache: None,
                batch_stats: None,
            });
        }
        let views: Vec<ArrayView2<'_, f64>> = inputs.iter().map(|i| i.rows.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).expect("equal widths");

        let mut a = x.dot(&self.matrix(self.entry.0, c, f).t()) + &self.vector(self.entry.1, c);
        a.mapv_inplace(|v| v.max(0.0));
        let entry_out = a.clone();

        let mut stages = Vec::with_capacity(self.stage_offsets.len());
        let mut stats = BatchStats {
            mean: Vec::new(),
            var: Vec::new(),
        };
        for b in 0..self.arch.blocks {
            let block_in = a;
            let mut h = block_in.clone();
            for st in 0..2 {
                let idx = 2 * b + st;
                let off = self.stage_offsets[idx];
                // the hidden bias cancels under instance norm
                let mut normalized = h.dot(&self.matrix(off.weight, c, c).t());
                let mut in_inv_std = Array2::zeros((segments.len(), c));
                for (k, seg) in segments.iter().enumerate() {
                    let inv = normalize_in_place(normalized.slice_mut(s![seg.clone(), ..]));
                    in_inv_std.row_mut(k).assign(&inv);
                }
                let (m, bn) = match off.norm {
                    Some((scale, shift)) => {
                        let (mean, inv_std) = match mode {
                            Mode::Train => {
                                let (mean, var) = column_moments(normalized.view());
                                let r = normalized.nrows() as f64;
                                let unbiased = if r > 1.0 { &var * (r / (r - 1.0)) } else { var.clone() };
                                stats.mean.push(mean.clone());
                                stats.var.push(unbiased);
                                (mean, var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt()))
                            }
                            Mode::Eval => (
                                self.running_mean[idx].clone(),
                                self.running_var[idx].mapv(|v| 1.0 / (v + NORM_EPS).sqrt()),
                            ),
                        };
                        let scale = self.vector(scale, c);
                        let shift = self.vector(shift, c);
                        let mul: Vec<f64> = (0..c).map(|j| inv_std[j] * scale[j]).collect();
                        let add: Vec<f64> = (0..c).map(|j| shift[j] - mean[j] * mul[j]).collect();
                        let mut y = if keep_cache { normalized.clone() } else { std::mem::take(&mut normalized) };
                        for mut row in y.outer_iter_mut() {
                            for (j, v) in row.iter_mut().enumerate() {
                                *v = (*v * mul[j] + add[j]).max(0.0);
                            }
                        }
                        (y, Some((mean, inv_std)))
                    }
                    None => {
                        let mut y = if keep_cache { normalized.clone() } else { std::mem::take(&mut normalized) };
                        y.mapv_inplace(|v| v.max(0.0));
                        (y, None)
                    }
                };
                if keep_cache {
                    stages.push(StageCache {
                        input: h,
                        normalized,
                        in_inv_std,
                        bn,
                        output: m.clone(),
                    });
                }
                h = m;
            }
            a = block_in + &h;
        }

        let logits = a.dot(&self.vector(self.exit.0, c)) + self.params[self.exit.1];
        let sigmoid = logits.mapv(crate::scoring::sigmoid);
        let mut probs = Vec::with_capacity(segments.len());
        let mut sums = Vec::with_capacity(segments.len());
        for seg in &segments {
            let o = sigmoid.slice(s![seg.clone()]);
            let total = o.sum();
            probs.push(o.iter().map(|v| v / total).collect());
            sums.push(total);
        }
        let cache = keep_cache.then(|| ForwardCache {
            mode,
            segments,
            input: x,
            entry_out,
            stages,
            last: a,
            sigmoid,
            sums,
        });
        let batch_stats = (mode == Mode::Train && self.arch.batch_norm).then_some(stats);
        Ok(ForwardOutput {
            probs,
            cache,
            batch_stats,
        })
    }

    /// Exponential moving average update of the batch-norm running
    /// statistics.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        for (i, (m, v)) in stats.mean.iter().zip(&stats.var).enumerate() {
            self.running_mean[i] = &self.running_mean[i] * (1.0 - BN_MOMENTUM) + m * BN_MOMENTUM;
            self.running_var[i] = &self.running_var[i] * (1.0 - BN_MOMENTUM) + v * BN_MOMENTUM;
        }
    }

    /// Gradient of `Σ_rows dlogits · logit` with respect to all parameters,
    /// where `dlogits` is indexed by the rows of the collated batch.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Result<Vec<f64>> {
        let rows = cache.input.nrows();
        if dlogits.len() != rows {
            return Err(ConsacError::ShapeMismatch(format!(
                "{} logit gradients for {rows} rows",
                dlogits.len()
            )));
        }
        if cache.stages.len() != self.stage_offsets.len() {
            return Err(ConsacError::ShapeMismatch("cache from a different network".into()));
        }
        let c = self.arch.channels;
        let f = self.arch.features();
        let mut grad = vec![0.0; self.params.len()];
        let dl = ArrayView1::from(dlogits);

        let dw_exit = cache.last.t().dot(&dl);
        add_to(&mut grad, self.exit.0, dw_exit.iter());
        grad[self.exit.1] += dl.sum();
        let w_exit = self.vector(self.exit.0, c);
        let mut g = Array2::from_shape_fn((rows, c), |(r, j)| dlogits[r] * w_exit[j]);

        for b in (0..self.arch.blocks).rev() {
            let mut dh = g.clone();
            for st in (0..2).rev() {
                let idx = 2 * b + st;
                let off = self.stage_offsets[idx];
                let sc = &cache.stages[idx];
                let mut dm = dh;
                ndarray::Zip::from(&mut dm)
                    .and(&sc.output)
                    .for_each(|d, &o| {
                        if o <= 0.0 {
                            *d = 0.0
                        }
                    });
                if let (Some((scale, shift)), Some((mean, inv_std))) = (off.norm, &sc.bn) {
                    let mut dscale = vec![0.0; c];
                    let mut dshift = vec![0.0; c];
                    let mut mean_dx = vec![0.0; c];
                    let mut mean_dx_xhat = vec![0.0; c];
                    for (d, x) in dm.outer_iter().zip(sc.normalized.outer_iter()) {
                        for j in 0..c {
                            let xhat = (x[j] - mean[j]) * inv_std[j];
                            dscale[j] += d[j] * xhat;
                            dshift[j] += d[j];
                        }
                    }
                    add_to(&mut grad, scale, dscale.iter());
                    add_to(&mut grad, shift, dshift.iter());
                    let gamma = self.vector(scale, c);
                    let n = rows as f64;
                    for j in 0..c {
                        mean_dx[j] = gamma[j] * dshift[j] / n;
                        mean_dx_xhat[j] = gamma[j] * dscale[j] / n;
                    }
                    for (mut d, x) in dm.outer_iter_mut().zip(sc.normalized.outer_iter()) {
                        for j in 0..c {
                            let dxhat = d[j] * gamma[j];
                            d[j] = match cache.mode {
                                Mode::Train => {
                                    let xhat = (x[j] - mean[j]) * inv_std[j];
                                    (dxhat - mean_dx[j] - xhat * mean_dx_xhat[j]) * inv_std[j]
                                }
                                Mode::Eval => dxhat * inv_std[j],
                            };
                        }
                    }
                }
                let mut dz = dm;
                for (k, seg) in cache.segments.iter().enumerate() {
                    normalize_backward_in_place(
                        dz.slice_mut(s![seg.clone(), ..]),
                        sc.normalized.slice(s![seg.clone(), ..]),
                        sc.in_inv_std.row(k),
                    );
                }
                add_to(&mut grad, off.weight, dz.t().dot(&sc.input).iter());
                add_to(&mut grad, off.bias, dz.sum_axis(Axis(0)).iter());
                dh = dz.dot(&self.matrix(off.weight, c, c));
            }
            g = g + dh;
        }

        ndarray::Zip::from(&mut g)
            .and(&cache.entry_out)
            .for_each(|d, &o| {
                if o <= 0.0 {
                    *d = 0.0
                }
            });
        let dw = g.t().dot(&cache.input);
        debug_assert_eq!(dw.dim(), (c, f));
        add_to(&mut grad, self.entry.0, dw.iter());
        add_to(&mut grad, self.entry.1, g.sum_axis(Axis(0)).iter());
        Ok(grad)
    }

    /// `Σ_k coefficients[k] · ∂(Σ_{i ∈ drawn[k]} log p_k(i)) / ∂w`, with the
    /// drawn multisets and states held fixed.
    pub fn log_prob_gradient(
        &self,
        inputs: &[NetworkInput],
        drawn: &[Vec<usize>],
        coefficients: &[f64],
        mode: Mode,
    ) -> Result<Vec<f64>> {
        if drawn.len() != inputs.len() || coefficients.len() != inputs.len() {
            return Err(ConsacError::ShapeMismatch(format!(
                "{} inputs, {} drawn sets, {} coefficients",
                inputs.len(),
                drawn.len(),
                coefficients.len()
            )));
        }
        let out = self.forward_batch(inputs, mode, true)?;
        let Some(cache) = out.cache else {
            return Ok(vec![0.0; self.params.len()]);
        };
        let mut dlogits = vec![0.0; cache.input.nrows()];
        for k in 0..inputs.len() {
            log_prob_dlogits(&cache, k, &drawn[k], coefficients[k], &mut dlogits)?;
        }
        self.backward(&cache, &dlogits)
    }

    pub fn to_json(&self) -> String {
        let record = |e: &ParamEntry| TensorRecord {
            name: e.name.clone(),
            shape: e.shape.clone(),
            values: self.params[e.range()].to_vec(),
        };
        let mut running = Vec::new();
        for (i, (m, v)) in self.running_mean.iter().zip(&self.running_var).enumerate() {
            let p = format!("block{}.stage{}", i / 2, i % 2);
            running.push(TensorRecord {
                name: format!("{p}.running_mean"),
                shape: vec![m.len()],
                values: m.to_vec(),
            });
            running.push(TensorRecord {
                name: format!("{p}.running_var"),
                shape: vec![v.len()],
                values: v.to_vec(),
            });
        }
        let doc = WeightsDocument {
            format_version: FORMAT_VERSION,
            architecture: self.arch,
            architecture_hash: self.hash(),
            parameters: self.layout.iter().map(record).collect(),
            running_stats: running,
        };
        serde_json::to_string(&doc).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| ConsacError::format(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(ConsacError::format(
                    "format_version",
                    format!("expected version {FORMAT_VERSION}, found {v}"),
                ))
            }
            None => return Err(ConsacError::format("format_version", "missing or not an integer")),
        }
        let doc: WeightsDocument = serde_path_to_error::deserialize(value)
            .map_err(|e| ConsacError::format(e.path().to_string(), e.inner().to_string()))?;
        let mut net = Network::new(doc.architecture, 0)?;
        if doc.architecture_hash != net.hash() {
            return Err(ConsacError::format(
                "architecture_hash",
                "does not match the declared architecture",
            ));
        }
        if doc.parameters.len() != net.layout.len() {
            return Err(ConsacError::format(
                "parameters",
                format!("expected {} tensors, found {}", net.layout.len(), doc.parameters.len()),
            ));
        }
        for (i, (rec, e)) in doc.parameters.iter().zip(&net.layout).enumerate() {
            check_record(rec, &e.name, &e.shape, &format!("parameters[{i}]"))?;
            net.params[e.offset..e.offset + e.len()].copy_from_slice(&rec.values);
        }
        let n_bn = net.running_mean.len();
        if doc.running_stats.len() != 2 * n_bn {
            return Err(ConsacError::format(
                "running_stats",
                format!("expected {} tensors, found {}", 2 * n_bn, doc.running_stats.len()),
            ));
        }
        let c = net.arch.channels;
        for i in 0..n_bn {
            let p = format!("block{}.stage{}", i / 2, i % 2);
            let (rm, rv) = (&doc.running_stats[2 * i], &doc.running_stats[2 * i + 1]);
            check_record(rm, &format!("{p}.running_mean"), &[c], &format!("running_stats[{}]", 2 * i))?;
            check_record(rv, &format!("{p}.running_var"), &[c], &format!("running_stats[{}]", 2 * i + 1))?;
            net.running_mean[i] = Array1::from(rm.values.clone());
            net.running_var[i] = Array1::from(rv.values.clone());
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| ConsacError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConsacError::io(path, e))?;
        Self::from_json(&text)
    }
}

fn add_to<'a>(grad: &mut [f64], offset: usize, values: impl Iterator<Item = &'a f64>) {
    for (g, v) in grad[offset..].iter_mut().zip(values) {
        *g += v;
    }
}

/// Adds `coefficient · ∂(Σ_{i ∈ drawn} log p(i)) / ∂logits` for input `k`
/// of the cached batch into `dlogits`.
pub fn log_prob_dlogits(
    cache: &ForwardCache,
    k: usize,
    drawn: &[usize],
    coefficient: f64,
    dlogits: &mut [f64],
) -> Result<()> {
    let seg = cache.segments[k].clone();
    let n = seg.len();
    if let Some(&bad) = drawn.iter().find(|&&i| i >= n) {
        return Err(ConsacError::ShapeMismatch(format!(
            "drawn index {bad} out of range for {n} observations"
        )));
    }
    if coefficient == 0.0 {
        return Ok(());
    }
    let o = cache.sigmoid_outputs(k);
    let total = cache.sums[k];
    let count = drawn.len() as f64;
    for (i, &oi) in o.iter().enumerate() {
        dlogits[seg.start + i] -= coefficient * count * oi * (1.0 - oi) / total;
    }
    for &i in drawn {
        dlogits[seg.start + i] += coefficient * (1.0 - o[i]);
    }
    Ok(())
}

/// Adds the logit gradient of a loss with gradient `dprobs` with respect to
/// the normalized weights of input `k`.
pub fn prob_dlogits(cache: &ForwardCache, k: usize, dprobs: &[f64], dlogits: &mut [f64]) {
    let seg = cache.segments[k].clone();
    let o = cache.sigmoid_outputs(k);
    let total = cache.sums[k];
    let weighted: f64 = dprobs.iter().zip(o.iter()).map(|(g, oi)| g * oi).sum::<f64>() / total;
    for (i, &oi) in o.iter().enumerate() {
        let d_o = (dprobs[i] - weighted) / total;
        dlogits[seg.start + i] += d_o * oi * (1.0 - oi);
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDocument {
    format_version: u32,
    architecture: Architecture,
    architecture_hash: String,
    parameters: Vec<TensorRecord>,
    running_stats: Vec<TensorRecord>,
}

fn check_record(rec: &TensorRecord, name: &str, shape: &[usize], path: &str) -> Result<()> {
    if rec.name != name {
        return Err(ConsacError::format(
            format!("{path}.name"),
            format!("expected `{name}`, found `{}`", rec.name),
        ));
    }
    if rec.shape != shape {
        return Err(ConsacError::format(
            format!("{path}.shape"),
            format!("expected {shape:?}, found {:?}", rec.shape),
        ));
    }
    if rec.values.len() != shape.iter().product::<usize>() {
        return Err(ConsacError::format(
            format!("{path}.values"),
            format!("expected {} values, found {}", shape.iter().product::<usize>(), rec.values.len()),
        ));
    }
    if rec.values.iter().any(|v| !v.is_finite()) {
        return Err(ConsacError::format(format!("{path}.values"), "non-finite value"));
    }
    Ok(())
}

/// Network-driven sampling weights. `state_blind` feeds a zero state, which
/// gives the unconditional variant.
#[derive(Debug, Clone, Copy)]
pub struct NetworkSampler<'a> {
    pub network: &'a Network,
    pub state_blind: bool,
}

impl<'a> NetworkSampler<'a> {
    pub fn conditional(network: &'a Network) -> Self {
        NetworkSampler {
            network,
            state_blind: false,
        }
    }

    pub fn state_blind(network: &'a Network) -> Self {
        NetworkSampler {
            network,
            state_blind: true,
        }
    }
}

impl WeightSource for NetworkSampler<'_> {
    fn weights(&self, observations: &[Observation], state: &StateVector) -> Result<Vec<f64>> {
        if self.state_blind {
            self.network
                .probabilities(observations, &StateVector::zeros(observations.len()))
        } else {
            self.network.probabilities(observations, state)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(batch_norm: bool) -> Network {
        Network::new(
            Architecture {
                input_dim: 2,
                channels: 8,
                blocks: 2,
                batch_norm,
            },
            7,
        )
        .unwrap()
    }

    fn random_input(n: usize, seed: u64) -> NetworkInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Array2::from_shape_fn((n, 3), |(_, j)| {
            if j == 2 {
                rng.random_range(0.0..1.0)
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        NetworkInput::from_rows(rows).unwrap()
    }

    #[test]
    fn outputs_are_normalized_and_positive() {
        for bn in [false, true] {
            let net = small(bn);
            let p = net.forward(&random_input(50, 1)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v > 0.0));
            let p = net.forward(&random_input(1, 2)).unwrap();
            assert_eq!(p, vec![1.0]);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let net = small(true);
        let input = random_input(40, 3);
        let p = net.forward(&input).unwrap();
        let perm: Vec<usize> = (0..40).map(|i| (i * 17 + 5) % 40).collect();
        let rows = Array2::from_shape_fn((40, 3), |(i, j)| input.rows()[(perm[i], j)]);
        let q = net.forward(&NetworkInput::from_rows(rows).unwrap()).unwrap();
        for i in 0..40 {
            assert!((q[i] - p[perm[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_get_identical_weights() {
        let net = small(false);
        let mut rows = random_input(10, 4).rows().clone();
        let r0 = rows.row(0).to_owned();
        rows.row_mut(5).assign(&r0);
        let p = net.forward(&NetworkInput::from_rows(rows).unwrap()).unwrap();
        assert_eq!(p[0], p[5]);
    }

    #[test]
    fn wrong_feature_count_is_rejected() {
        let net = small(false);
        let rows = Array2::zeros((4, 5));
        let err = net.forward(&NetworkInput::from_rows(rows).unwrap());
        assert!(matches!(err, Err(ConsacError::ShapeMismatch(_))));
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let net = small(true);
        let a = random_input(20, 5);
        let b = random_input(30, 6);
        let single = net.forward(&a).unwrap();
        let batched = net.forward_batch(&[a, b], Mode::Eval, false).unwrap();
        assert_eq!(single, batched.probs[0]);
    }

    #[test]
    fn gradient_is_linear_in_coefficients() {
        let net = small(true);
        let inputs = [random_input(12, 8), random_input(9, 9)];
        let drawn = vec![vec![0, 3], vec![1, 1]];
        let zero = net.log_prob_gradient(&inputs, &drawn, &[0.0, 0.0], Mode::Train).unwrap();
        assert!(zero.iter().all(|&g| g == 0.0));
        let g1 = net.log_prob_gradient(&inputs, &drawn, &[0.3, -0.2], Mode::Train).unwrap();
        let g2 = net.log_prob_gradient(&inputs, &drawn, &[0.6, -0.4], Mode::Train).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    fn objective(net: &Network, inputs: &[NetworkInput], drawn: &[Vec<usize>], coef: &[f64], mode: Mode) -> f64 {
        let out = net.forward_batch(inputs, mode, false).unwrap();
        out.probs
            .iter()
            .zip(drawn)
            .zip(coef)
            .map(|((p, d), c)| c * d.iter().map(|&i| p[i].ln()).sum::<f64>())
            .sum()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (bn, mode) in [(true, Mode::Train), (true, Mode::Eval), (false, Mode::Train)] {
            let mut net = small(bn);
            if bn {
                // non-trivial running statistics and affine parameters
                let out = net
                    .forward_batch(&[random_input(30, 20)], Mode::Train, false)
                    .unwrap();
                net.update_running_stats(&out.batch_stats.unwrap());
                let mut rng = ChaCha8Rng::seed_from_u64(21);
                for e in net.layout.clone() {
                    if matches!(e.class, ParamClass::NormScale | ParamClass::NormShift | ParamClass::ExitBias) {
                        for p in &mut net.params[e.range()] {
                            *p += rng.random_range(-0.3..0.3);
                        }
                    }
                }
            }
            let inputs = [random_input(15, 10), random_input(11, 11)];
            let drawn = vec![vec![0, 4, 4], vec![2, 7]];
            let coef = [0.7, -1.3];
            let grad = net.log_prob_gradient(&inputs, &drawn, &coef, mode).unwrap();
            let h = 1e-5;
            let base_pattern = net.forward_batch(&inputs, mode, true).unwrap().cache.unwrap().relu_pattern();
            let mut checked = 0;
            for j in 0..net.num_params() {
                let orig = net.params[j];
                net.params[j] = orig + h;
                let plus = objective(&net, &inputs, &drawn, &coef, mode);
                let pat_p = net.forward_batch(&inputs, mode, true).unwrap().cache.unwrap().relu_pattern();
                net.params[j] = orig - h;
                let minus = objective(&net, &inputs, &drawn, &coef, mode);
                let pat_m = net.forward_batch(&inputs, mode, true).unwrap().cache.unwrap().relu_pattern();
                net.params[j] = orig;
                if pat_p != base_pattern || pat_m != base_pattern {
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * h);
                let tol = 1e-4 * grad[j].abs().max(numeric.abs()) + 1e-8;
                assert!(
                    (grad[j] - numeric).abs() <= tol,
                    "param {j} ({bn}, {mode:?}): analytic {} numeric {numeric}",
                    grad[j]
                );
                checked += 1;
            }
            assert!(checked > net.num_params() * 9 / 10);
        }
    }

    #[test]
    fn prob_gradient_matches_finite_differences() {
        let mut net = small(false);
        let inputs = [random_input(10, 30)];
        let weights: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let loss = |net: &Network| -> f64 {
            let p = &net.forward_batch(&inputs, Mode::Train, false).unwrap().probs[0];
            p.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let out = net.forward_batch(&inputs, Mode::Train, true).unwrap();
        let cache = out.cache.unwrap();
        let mut dl = vec![0.0; 10];
        prob_dlogits(&cache, 0, &weights, &mut dl);
        let grad = net.backward(&cache, &dl).unwrap();
        for j in (0..net.num_params()).step_by(7) {
            let orig = net.params[j];
            net.params[j] = orig + 1e-5;
            let plus = loss(&net);
            net.params[j] = orig - 1e-5;
            let minus = loss(&net);
            net.params[j] = orig;
            let numeric = (plus - minus) / 2e-5;
            assert!((grad[j] - numeric).abs() <= 1e-4 * grad[j].abs().max(numeric.abs()) + 1e-8);
        }
    }

    #[test]
    fn running_stats_move_towards_batch() {
        let mut net = small(true);
        let out = net.forward_batch(&[random_input(25, 12)], Mode::Train, false).unwrap();
        let stats = out.batch_stats.unwrap();
        net.update_running_stats(&stats);
        let (m, v) = net.running_stats();
        for i in 0..m.len() {
            for c in 0..8 {
                assert!((m[i][c] - 0.1 * stats.mean[i][c]).abs() < 1e-15);
                assert!((v[i][c] - (0.9 + 0.1 * stats.var[i][c])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let mut net = small(true);
        let out = net.forward_batch(&[random_input(25, 13)], Mode::Train, false).unwrap();
        net.update_running_stats(&out.batch_stats.unwrap());
        let back = Network::from_json(&net.to_json()).unwrap();
        assert_eq!(back.params.len(), net.params.len());
        for (a, b) in back.params.iter().zip(&net.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in back.running_var.iter().zip(&net.running_var) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back, net);
    }

    #[test]
    fn malformed_documents_are_rejected() {
        let net = small(false);
        let text = net.to_json();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(Network::from_json(truncated), Err(ConsacError::Format { .. })));

        let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        match Network::from_json(&bumped) {
            Err(ConsacError::Format { path, message }) => {
                assert_eq!(path, "format_version");
                assert!(message.contains('1') && message.contains('2'));
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["parameters"][2]["shape"] = serde_json::json!([3, 3]);
        match Network::from_json(&value.to_string()) {
            Err(ConsacError::Format { path, .. }) => assert_eq!(path, "parameters[2].shape"),
            other => panic!("unexpected {other:?}"),
        }

        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["parameters"][1]["values"] = serde_json::json!("oops");
        match Network::from_json(&value.to_string()) {
            Err(ConsacError::Format { path, .. }) => assert_eq!(path, "parameters[1].values"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
