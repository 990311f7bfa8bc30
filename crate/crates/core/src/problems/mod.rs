//! Datasets and differentiable objectives with hand-derived per-example
//! gradients.
//!
//! Every objective has the form `F(w) = (1/n) Σ f_i(w) + (λ/2)‖w‖²` over the
//! training split, where `λ` is the weight decay. Each `f_i` reported by
//! [`Problem::loss_example`] already carries the ridge term, so the mean of
//! per-example losses equals [`Problem::loss_full`].

mod data;
mod erm;
mod matrix;

pub use data::{
    gen_linear_data, gen_multiclass_data, grade_column_scales, load_labelled_csv, nearest_mean_accuracy,
    polynomial_features, with_interactions, Dataset, InteractionFeatures, NoiseRule, Split,
    Targets,
};
pub use erm::{erm_reference, ErmReference};
pub use matrix::Matrix;
pub(crate) use matrix::{axpy, dot, norm_sq};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Softmax probabilities are clamped below at this value inside the log.
const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// `f_i(w) = (y_i - w·x_i)²`.
    LeastSquares,
    /// `f_i = (y_i - w₁ᵀ W₂ W₃ x_i)²`, a three-layer net with linear activations.
    LinearNet,
    /// Softmax cross-entropy of a linear model with one bias per class.
    MulticlassLogistic,
}

/// How the held-out metric is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Mean squared error, lower is better.
    TestLoss,
    /// Classification accuracy, higher is better.
    Accuracy,
}

/// One named block of the flat weight vector, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Block {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view<'a>(&self, w: &'a [f64]) -> &'a [f64] {
        &w[self.offset..self.offset + self.len()]
    }
}

/// Layout of the flat weight vector.
///
/// * `LeastSquares`: `w` (d).
/// * `LinearNet`: `w1` (d), then `W2` (d×d), then `W3` (d×d).
/// * `MulticlassLogistic`: `W` (C×d), then `b` (C).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Shape {
    pub blocks: Vec<Block>,
}

impl Shape {
    fn from_blocks(spec: &[(&'static str, usize, usize)]) -> Self {
        let mut offset = 0;
        let blocks = spec
            .iter()
            .map(|&(name, rows, cols)| {
                let b = Block {
                    name,
                    rows,
                    cols,
                    offset,
                };
                offset += rows * cols;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Block::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    dataset: Dataset,
    kind: ProblemKind,
    weight_decay: f64,
    shape: Shape,
    classes: usize,
}

impl Problem {
    pub fn new(dataset: Dataset, kind: ProblemKind, weight_decay: f64) -> Result<Self> {
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return config_err(format!("weight_decay must be finite and >= 0, got {weight_decay}"));
        }
        if dataset.n_train() == 0 {
            return config_err("training split is empty");
        }
        let d = dataset.dim();
        let (shape, classes) = match kind {
            ProblemKind::LeastSquares | ProblemKind::LinearNet => {
                if dataset.train.real_targets().is_none() {
                    return config_err(format!("{kind:?} needs real-valued targets"));
                }
                let shape = if kind == ProblemKind::LeastSquares {
                    Shape::from_blocks(&[("w", d, 1)])
                } else {
                    Shape::from_blocks(&[("w1", d, 1), ("W2", d, d), ("W3", d, d)])
                };
                (shape, 0)
            }
            ProblemKind::MulticlassLogistic => {
                let Some(labels) = dataset.train.labels() else {
                    return config_err("multiclass_logistic needs class labels");
                };
                let classes = dataset
                    .classes
                    .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
                if classes < 2 {
                    return config_err("multiclass_logistic needs at least two classes");
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                    return config_err(format!("label {bad} outside 0..{classes}"));
                }
                (Shape::from_blocks(&[("W", classes, d), ("b", classes, 1)]), classes)
            }
        };
        Ok(Self {
            dataset,
            kind,
            weight_decay,
            shape,
            classes,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn num_weights(&self) -> usize {
        self.shape.len()
    }

    pub fn n_train(&self) -> usize {
        self.dataset.n_train()
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    pub fn metric_kind(&self) -> MetricKind {
        match self.kind {
            ProblemKind::MulticlassLogistic => MetricKind::Accuracy,
            _ => MetricKind::TestLoss,
        }
    }

    /// Initial weights: zeros for the convex problems; for the linear net each
    /// block is i.i.d. normal with standard deviation `1/√d`.
    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            ProblemKind::LinearNet => {
                let sd = 1.0 / (self.dim() as f64).sqrt();
                let normal = Normal::new(0.0, sd).expect("positive sd");
                (0..self.num_weights()).map(|_| normal.sample(rng)).collect()
            }
            _ => vec![0.0; self.num_weights()],
        }
    }

    pub fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.num_weights() {
            return config_err(format!(
                "weights have length {}, problem expects {}",
                w.len(),
                self.num_weights()
            ));
        }
        if let Some((index, &value)) = w.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(())
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n_train() {
            return Err(Error::Index {
                index: i,
                len: self.n_train(),
            });
        }
        Ok(())
    }

    fn ridge(&self, w: &[f64]) -> f64 {
        0.5 * self.weight_decay * norm_sq(w)
    }

    /// `f_i(w)` including the ridge term.
    pub fn loss_example(&self, w: &[f64], i: usize) -> Result<f64> {
        self.check_weights(w)?;
        self.check_index(i)?;
        let ctx = Context::new(self, w);
        Ok(ctx.data_loss(&self.dataset.train, i) + self.ridge(w))
    }

    /// `F(w)` over the training split.
    pub fn loss_full(&self, w: &[f64]) -> Result<f64> {
        self.check_weights(w)?;
        let ctx = Context::new(self, w);
        let split = &self.dataset.train;
        let total: f64 = (0..split.len()).map(|i| ctx.data_loss(split, i)).sum();
        Ok(total / split.len() as f64 + self.ridge(w))
    }

    /// Held-out metric: test MSE for regression, accuracy for classification.
    /// `None` when the test split is empty.
    pub fn test_metric(&self, w: &[f64]) -> Result<Option<f64>> {
        self.check_weights(w)?;
        let split = &self.dataset.test;
        if split.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.split_metric(split, w)))
    }

    /// Classification accuracy on the training split (NaN for regression).
    pub fn train_accuracy(&self, w: &[f64]) -> Result<f64> {
        self.check_weights(w)?;
        if self.kind != ProblemKind::MulticlassLogistic {
            return Ok(f64::NAN);
        }
        Ok(self.split_metric(&self.dataset.train, w))
    }

    fn split_metric(&self, split: &Split, w: &[f64]) -> f64 {
        let ctx = Context::new(self, w);
        let n = split.len() as f64;
        match self.kind {
            ProblemKind::MulticlassLogistic => {
                let labels = split.labels().expect("labels checked");
                let mut logits = vec![0.0; self.classes];
                let hits = (0..split.len())
                    .filter(|&i| {
                        ctx.logits(split.features.row(i), &mut logits);
                        argmax(&logits) == labels[i]
                    })
                    .count();
                hits as f64 / n
            }
            _ => (0..split.len()).map(|i| ctx.data_loss(split, i)).sum::<f64>() / n,
        }
    }

    /// `∇f_i(w)`, including the ridge term.
    pub fn grad_example(&self, w: &[f64], i: usize) -> Result<Vec<f64>> {
        self.grad_minibatch(w, &[i])
    }

    /// Mean of `∇f_i(w)` over `indices`; duplicates count with multiplicity.
    pub fn grad_minibatch(&self, w: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
        if indices.is_empty() {
            return config_err("minibatch index list is empty");
        }
        self.check_weights(w)?;
        for &i in indices {
            self.check_index(i)?;
        }
        let mut out = vec![0.0; w.len()];
        self.accumulate(w, indices.iter().copied(), indices.len(), &mut out);
        Ok(out)
    }

    /// `∇F(w)`.
    pub fn grad_full(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_weights(w)?;
        let n = self.n_train();
        let mut out = vec![0.0; w.len()];
        self.accumulate(w, 0..n, n, &mut out);
        Ok(out)
    }

    /// Every per-example gradient, one row per training example.
    pub fn per_example_grads(&self, w: &[f64]) -> Result<Matrix> {
        self.check_weights(w)?;
        let n = self.n_train();
        let p = w.len();
        let mut data = vec![0.0; n * p];
        for (i, row) in data.chunks_mut(p).enumerate() {
            self.accumulate(w, std::iter::once(i), 1, row);
        }
        Matrix::new(n, p, data)
    }

    /// Writes `(1/count) Σ_{i ∈ indices} ∇f_i(w)` into `out` (overwriting it).
    /// The sum runs in index order so the result is bit-stable.
    pub(crate) fn accumulate(
        &self,
        w: &[f64],
        indices: impl Iterator<Item = usize>,
        count: usize,
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let ctx = Context::new(self, w);
        ctx.accumulate(&self.dataset.train, indices, out);
        let scale = 1.0 / count as f64;
        for (o, wi) in out.iter_mut().zip(w) {
            *o = *o * scale + self.weight_decay * wi;
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Per-weight precomputation shared by every example.
struct Context<'a> {
    problem: &'a Problem,
    w: &'a [f64],
    /// LinearNet: effective linear predictor `W3ᵀ W2ᵀ w1`.
    effective: Vec<f64>,
    /// LinearNet: `W2ᵀ w1`.
    back: Vec<f64>,
}

impl<'a> Context<'a> {
    fn new(problem: &'a Problem, w: &'a [f64]) -> Self {
        let mut effective = Vec::new();
        let mut back = Vec::new();
        if problem.kind == ProblemKind::LinearNet {
            let d = problem.dim();
            let (w1, w2, w3) = net_blocks(w, d);
            back = vec![0.0; d];
            for r in 0..d {
                axpy(w1[r], &w2[r * d..(r + 1) * d], &mut back);
            }
            effective = vec![0.0; d];
            for r in 0..d {
                axpy(back[r], &w3[r * d..(r + 1) * d], &mut effective);
            }
        }
        Self {
            problem,
            w,
            effective,
            back,
        }
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let c = self.problem.classes;
        let (wm, b) = self.w.split_at(c * d);
        for k in 0..c {
            out[k] = dot(&wm[k * d..(k + 1) * d], x) + b[k];
        }
    }

    /// Log-sum-exp of `logits`, computed with max subtraction.
    fn log_partition(logits: &[f64]) -> f64 {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
    }

    fn data_loss(&self, split: &Split, i: usize) -> f64 {
        let x = split.features.row(i);
        match self.problem.kind {
            ProblemKind::LeastSquares => {
                let y = split.real_targets().expect("checked")[i];
                (y - dot(self.w, x)).powi(2)
            }
            ProblemKind::LinearNet => {
                let y = split.real_targets().expect("checked")[i];
                (y - dot(&self.effective, x)).powi(2)
            }
            ProblemKind::MulticlassLogistic => {
                let y = split.labels().expect("checked")[i];
                let mut z = vec![0.0; self.problem.classes];
                self.logits(x, &mut z);
                (Self::log_partition(&z) - z[y]).min(-PROB_FLOOR.ln())
            }
        }
    }

    fn accumulate(&self, split: &Split, indices: impl Iterator<Item = usize>, out: &mut [f64]) {
        let feats = &split.features;
        let d = feats.cols();
        match self.problem.kind {
            ProblemKind::LeastSquares => {
                let y = split.real_targets().expect("checked");
                for i in indices {
                    let x = feats.row(i);
                    let r = y[i] - dot(self.w, x);
                    axpy(-2.0 * r, x, out);
                }
            }
            ProblemKind::LinearNet => {
                let y = split.real_targets().expect("checked");
                let (w1, w2, w3) = net_blocks(self.w, d);
                let (g1, rest) = out.split_at_mut(d);
                let (g2, g3) = rest.split_at_mut(d * d);
                // Σ s_i u_i and Σ s_i x_i, with s_i = -2 r_i and u_i = W3 x_i.
                let mut su = vec![0.0; d];
                let mut sx = vec![0.0; d];
                let mut u = vec![0.0; d];
                for i in indices {
                    let x = feats.row(i);
                    for (r, ur) in u.iter_mut().enumerate() {
                        *ur = dot(&w3[r * d..(r + 1) * d], x);
                    }
                    let s = -2.0 * (y[i] - dot(&self.effective, x));
                    // d p / d w1 = W2 u
                    for (r, g) in g1.iter_mut().enumerate() {
                        *g += s * dot(&w2[r * d..(r + 1) * d], &u);
                    }
                    axpy(s, &u, &mut su);
                    axpy(s, x, &mut sx);
                }
                // d p / d W2 = w1 uᵀ, d p / d W3 = (W2ᵀ w1) xᵀ
                for r in 0..d {
                    axpy(w1[r], &su, &mut g2[r * d..(r + 1) * d]);
                    axpy(self.back[r], &sx, &mut g3[r * d..(r + 1) * d]);
                }
            }
            ProblemKind::MulticlassLogistic => {
                let labels = split.labels().expect("checked");
                let c = self.problem.classes;
                let mut z = vec![0.0; c];
                let (gw, gb) = out.split_at_mut(c * d);
                for i in indices {
                    let x = feats.row(i);
                    self.logits(x, &mut z);
                    let lse = Self::log_partition(&z);
                    for k in 0..c {
                        let p = (z[k] - lse).exp();
                        let coef = p - if k == labels[i] { 1.0 } else { 0.0 };
                        axpy(coef, x, &mut gw[k * d..(k + 1) * d]);
                        gb[k] += coef;
                    }
                }
            }
        }
    }
}

fn net_blocks(w: &[f64], d: usize) -> (&[f64], &[f64], &[f64]) {
    let (w1, rest) = w.split_at(d);
    let (w2, w3) = rest.split_at(d * d);
    (w1, w2, w3)
}
