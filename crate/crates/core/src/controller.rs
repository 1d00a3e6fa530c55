//! Per-layer scoring networks, threshold selection, and exact gradients of
//! selection log-probabilities.
//!
//! Each layer ℓ owns an independent two-layer network
//! `logits = W2 · tanh(W1 · x + b1) + b2` over the layer feature `x` of width
//! `d·ℓ`. Scores are `softmax(logits)`.
//!
//! Training draws operators by sequential sampling without replacement
//! (Plackett–Luce) until the drawn score mass strictly exceeds the threshold;
//! evaluation takes the highest-scoring prefix under the same stopping rule.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::IndexChange;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer {0} is out of range")]
    NoSuchLayer(usize),
    #[error("gradient shape does not match parameters")]
    ShapeMismatch,
    #[error("selection index {0} is out of range or repeated")]
    InvalidSelection(usize),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn push_row(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend(row);
        self.rows += 1;
    }

    fn remove_row(&mut self, r: usize) {
        self.data.drain(r * self.cols..(r + 1) * self.cols);
        self.rows -= 1;
    }

    /// `self · x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · y`
    pub fn t_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    shape: [usize; 2],
    data: Vec<Vec<f64>>,
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MatrixRepr {
            shape: [self.rows, self.cols],
            data: (0..self.rows).map(|r| self.row(r).to_vec()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        let [rows, cols] = repr.shape;
        if repr.data.len() != rows || repr.data.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("matrix data does not match its shape"));
        }
        Ok(Matrix {
            rows,
            cols,
            data: repr.data.into_iter().flatten().collect(),
        })
    }
}

/// Scoring network for one supernet layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerController {
    /// 1-based layer index.
    pub layer: usize,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub scores: ScoreVector,
}

impl LayerController {
    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn n_ops(&self) -> usize {
        self.w2.rows
    }

    pub fn forward(&self, feature: &[f64]) -> Result<Forward, ControllerError> {
        if feature.len() != self.input_dim() {
            return Err(ControllerError::DimensionMismatch {
                expected: self.input_dim(),
                got: feature.len(),
            });
        }
        let hidden: Vec<f64> = self
            .w1
            .mul_vec(feature)
            .iter()
            .zip(&self.b1)
            .map(|(z, b)| (z + b).tanh())
            .collect();
        let logits: Vec<f64> = self
            .w2
            .mul_vec(&hidden)
            .iter()
            .zip(&self.b2)
            .map(|(z, b)| z + b)
            .collect();
        Ok(Forward {
            hidden,
            scores: ScoreVector::from_logits(logits),
        })
    }

    /// Parameter blocks in the order W1, b1, W2, b2.
    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }

    pub fn params(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }
}

/// Softmax scores over operators together with their logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let scores = exps.iter().map(|e| e / total).collect();
        Self { logits, scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerDims {
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub n_ops: usize,
}

/// Parameters of every layer controller plus a version tag that changes on
/// every update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetState {
    pub version: u64,
    pub layers: Vec<LayerController>,
}

pub const INIT_RANGE: f64 = 0.1;
const SPLIT_NOISE: f64 = 0.01;

impl SupernetState {
    /// Uniform `[-0.1, 0.1]` initialization from a seeded ChaCha stream.
    pub fn init(seed: u64, dims: ControllerDims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        let layers = (1..=dims.layers)
            .map(|layer| {
                let input = dims.embed_dim * layer;
                let w1 = Matrix::from_fn(dims.hidden, input, |_, _| draw());
                let b1 = (0..dims.hidden).map(|_| draw()).collect();
                let w2 = Matrix::from_fn(dims.n_ops, dims.hidden, |_, _| draw());
                let b2 = (0..dims.n_ops).map(|_| draw()).collect();
                LayerController { layer, w1, b1, w2, b2 }
            })
            .collect();
        Self { version: 0, layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn n_ops(&self) -> usize {
        self.layers.first().map_or(0, LayerController::n_ops)
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerController, ControllerError> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or(ControllerError::NoSuchLayer(layer))
    }

    pub fn score_layer(&self, layer: usize, feature: &[f64]) -> Result<ScoreVector, ControllerError> {
        Ok(self.layer(layer)?.forward(feature)?.scores)
    }

    /// `∇ log p(selection)` for one layer's parameters.
    pub fn grad_log_prob(
        &self,
        layer: usize,
        feature: &[f64],
        selection: &[usize],
    ) -> Result<LayerGradient, ControllerError> {
        let ctrl = self.layer(layer)?;
        let fwd = ctrl.forward(feature)?;
        let g_logits = selection_logit_grad(&fwd.scores.logits, selection)?;
        // logits = W2·a + b2
        let mut w2 = Matrix::zeros(ctrl.w2.rows, ctrl.w2.cols);
        for (r, &g) in g_logits.iter().enumerate() {
            if g != 0.0 {
                for (c, &a) in fwd.hidden.iter().enumerate() {
                    w2.set(r, c, g * a);
                }
            }
        }
        let g_hidden = ctrl.w2.t_mul_vec(&g_logits);
        // a = tanh(pre)
        let g_pre: Vec<f64> = g_hidden
            .iter()
            .zip(&fwd.hidden)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let mut w1 = Matrix::zeros(ctrl.w1.rows, ctrl.w1.cols);
        for (r, &g) in g_pre.iter().enumerate() {
            if g != 0.0 {
                for (c, &x) in feature.iter().enumerate() {
                    w1.set(r, c, g * x);
                }
            }
        }
        Ok(LayerGradient {
            layer,
            w1,
            b1: g_pre,
            w2,
            b2: g_logits,
        })
    }

    pub fn zero_gradient(&self) -> SupernetGradient {
        SupernetGradient {
            layers: self.layers.iter().map(LayerGradient::zeros_like).collect(),
        }
    }

    /// `φ ← φ + scale · g`, then bumps the version.
    pub fn apply_gradient(
        &mut self,
        grad: &SupernetGradient,
        scale: f64,
    ) -> Result<(), ControllerError> {
        if grad.layers.len() != self.layers.len()
            || grad
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, p)| g.w1.shape() != p.w1.shape() || g.w2.shape() != p.w2.shape())
        {
            return Err(ControllerError::ShapeMismatch);
        }
        if scale != 0.0 {
            for (p, g) in self.layers.iter_mut().zip(&grad.layers) {
                for (pp, gg) in p.params_mut().into_iter().zip(g.params()) {
                    for (x, d) in pp.iter_mut().zip(gg) {
                        if *d != 0.0 {
                            *x += scale * d;
                        }
                    }
                }
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Keeps output columns aligned with registry indices after a structural
    /// patch. A split copies the parent's row with small uniform noise.
    pub fn apply_index_change(&mut self, change: IndexChange, rng: &mut impl Rng) {
        match change {
            IndexChange::Unchanged => return,
            IndexChange::Appended { parent, .. } => {
                for ctrl in &mut self.layers {
                    let row = ctrl
                        .w2
                        .row(parent)
                        .iter()
                        .map(|w| w + rng.gen_range(-SPLIT_NOISE..=SPLIT_NOISE))
                        .collect();
                    ctrl.w2.push_row(row);
                    let b = ctrl.b2[parent] + rng.gen_range(-SPLIT_NOISE..=SPLIT_NOISE);
                    ctrl.b2.push(b);
                }
            }
            IndexChange::Removed { index } => {
                for ctrl in &mut self.layers {
                    ctrl.w2.remove_row(index);
                    ctrl.b2.remove(index);
                }
            }
        }
        self.version += 1;
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.params().iter().map(|p| p.len()).sum::<usize>())
            .sum()
    }
}

/// Gradient with the same shapes as one [`LayerController`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub layer: usize,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl LayerGradient {
    fn zeros_like(p: &LayerController) -> Self {
        Self {
            layer: p.layer,
            w1: Matrix::zeros(p.w1.rows, p.w1.cols),
            b1: vec![0.0; p.b1.len()],
            w2: Matrix::zeros(p.w2.rows, p.w2.cols),
            b2: vec![0.0; p.b2.len()],
        }
    }

    pub fn params(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }

    pub fn norm_sq(&self) -> f64 {
        self.params().iter().flat_map(|p| p.iter()).map(|x| x * x).sum()
    }
}

/// Gradient over all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetGradient {
    pub layers: Vec<LayerGradient>,
}

impl SupernetGradient {
    /// `self += scale · g` for one layer's gradient.
    pub fn add_layer(&mut self, g: &LayerGradient, scale: f64) -> Result<(), ControllerError> {
        let dst = self
            .layers
            .get_mut(g.layer.wrapping_sub(1))
            .ok_or(ControllerError::NoSuchLayer(g.layer))?;
        if dst.w1.shape() != g.w1.shape() || dst.w2.shape() != g.w2.shape() {
            return Err(ControllerError::ShapeMismatch);
        }
        for (d, s) in dst.params_mut().into_iter().zip(g.params()) {
            for (x, y) in d.iter_mut().zip(s) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    /// `self += scale · other`
    pub fn add(&mut self, other: &SupernetGradient, scale: f64) -> Result<(), ControllerError> {
        for g in &other.layers {
            self.add_layer(g, scale)?;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.layers.iter().map(LayerGradient::norm_sq).sum::<f64>().sqrt()
    }
}

/// Highest-scoring prefix whose cumulative score strictly exceeds `thres`.
/// Ties are broken by ascending operator index.
pub fn select_deterministic(scores: &[f64], thres: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut picked = Vec::new();
    for i in order {
        picked.push(i);
        mass += scores[i];
        if mass > thres {
            break;
        }
    }
    picked
}

/// Draws operators without replacement, each with probability proportional
/// to its score among the remaining ones, until the drawn score mass strictly
/// exceeds `thres`. Returns the draw order and its log-probability.
pub fn sample_selection(scores: &ScoreVector, thres: f64, rng: &mut impl Rng) -> (Vec<usize>, f64) {
    let n = scores.len();
    let mut taken = vec![false; n];
    let mut seq = Vec::new();
    let mut mass = 0.0;
    while seq.len() < n {
        let remaining: f64 = (0..n).filter(|&i| !taken[i]).map(|i| scores.scores[i]).sum();
        let mut u = rng.gen::<f64>() * remaining;
        let mut pick = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            if scores.scores[i] <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < scores.scores[i] {
                break;
            }
            u -= scores.scores[i];
        }
        // Only reachable when every remaining score underflowed to zero.
        let Some(i) = pick.or_else(|| (0..n).find(|&i| !taken[i])) else {
            break;
        };
        taken[i] = true;
        seq.push(i);
        mass += scores.scores[i];
        if mass > thres {
            break;
        }
    }
    let log_prob = selection_log_prob(&scores.logits, &seq).expect("indices are in range");
    (seq, log_prob)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_selection(n: usize, selection: &[usize]) -> Result<(), ControllerError> {
    let mut seen = vec![false; n];
    for &i in selection {
        if i >= n || seen[i] {
            return Err(ControllerError::InvalidSelection(i));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Plackett–Luce log-probability of drawing `selection` in order:
/// `Σ_j [z_{i_j} − logsumexp_{i not yet drawn} z_i]`, which equals
/// `Σ_j log(s_{i_j} / (1 − Σ_{drawn before j} s))` for `s = softmax(z)`.
pub fn selection_log_prob(logits: &[f64], selection: &[usize]) -> Result<f64, ControllerError> {
    check_selection(logits.len(), selection)?;
    let mut taken = vec![false; logits.len()];
    let mut total = 0.0;
    for &i in selection {
        let lse = log_sum_exp(
            logits
                .iter()
                .zip(&taken)
                .filter(|(_, &t)| !t)
                .map(|(&z, _)| z),
        );
        total += logits[i] - lse;
        taken[i] = true;
    }
    Ok(total)
}

/// `∂/∂z` of [`selection_log_prob`]: `Σ_j (e_{i_j} − softmax over the
/// not-yet-drawn set)`.
pub fn selection_logit_grad(logits: &[f64], selection: &[usize]) -> Result<Vec<f64>, ControllerError> {
    check_selection(logits.len(), selection)?;
    let n = logits.len();
    let mut grad = vec![0.0; n];
    let mut taken = vec![false; n];
    for &i in selection {
        let max = (0..n)
            .filter(|&k| !taken[k])
            .map(|k| logits[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..n)
            .filter(|&k| !taken[k])
            .map(|k| (logits[k] - max).exp())
            .sum();
        for k in (0..n).filter(|&k| !taken[k]) {
            grad[k] -= (logits[k] - max).exp() / total;
        }
        grad[i] += 1.0;
        taken[i] = true;
    }
    Ok(grad)
}
