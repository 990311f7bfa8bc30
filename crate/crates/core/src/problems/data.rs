//! Synthetic data generators, feature expansion and CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{config_err, Result};

/// Regression targets or class labels in `0..classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Real(Vec<f64>),
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, index: &[usize]) -> Self {
        match self {
            Targets::Real(v) => Targets::Real(index.iter().map(|&i| v[i]).collect()),
            Targets::Labels(v) => Targets::Labels(index.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub features: Matrix,
    pub targets: Targets,
    /// Row numbers in the generated (pre-split) data.
    pub rows: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn real_targets(&self) -> Option<&[f64]> {
        match &self.targets {
            Targets::Real(v) => Some(v),
            Targets::Labels(_) => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(v) => Some(v),
            Targets::Real(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub seed: u64,
    /// Number of classes for labelled data.
    pub classes: Option<usize>,
    /// Generating weights of linear data.
    pub w_star: Option<Vec<f64>>,
    /// Variance of the additive label noise of linear data.
    pub noise_variance: Option<f64>,
    /// True cluster centres of multiclass data, one row per class.
    pub class_means: Option<Matrix>,
}

impl Dataset {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_test(&self) -> usize {
        self.test.len()
    }

    pub fn dim(&self) -> usize {
        self.train.features.cols()
    }

    /// Applies a column transform fitted on the training split to both splits.
    pub fn map_features(mut self, f: impl Fn(&Matrix) -> Matrix) -> Self {
        self.train.features = f(&self.train.features);
        self.test.features = f(&self.test.features);
        self
    }
}

/// Label-noise rule for [`gen_linear_data`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRule {
    /// Noise variance `d / 100`.
    DimensionScaled,
    Unit,
    Zero,
}

impl NoiseRule {
    pub fn variance(self, d: usize) -> f64 {
        match self {
            NoiseRule::DimensionScaled => d as f64 / 100.0,
            NoiseRule::Unit => 1.0,
            NoiseRule::Zero => 0.0,
        }
    }
}

fn split_counts(n: usize, test_fraction: f64) -> Result<(usize, usize)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return config_err(format!("test_fraction must lie in [0, 1), got {test_fraction}"));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test >= n {
        return config_err(format!("test_fraction {test_fraction} leaves no training rows"));
    }
    Ok((n - n_test, n_test))
}

fn split(
    features: Matrix,
    targets: Targets,
    test_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Split, Split)> {
    let n = features.rows();
    let (n_train, _) = split_counts(n, test_fraction)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let (tr, te) = perm.split_at(n_train);
    let mut tr = tr.to_vec();
    let mut te = te.to_vec();
    tr.sort_unstable();
    te.sort_unstable();
    let make = |rows: Vec<usize>| Split {
        features: features.select_rows(&rows),
        targets: targets.select(&rows),
        rows,
    };
    Ok((make(tr), make(te)))
}

/// Linear-Gaussian regression data: `y = x·w* + noise` with standard normal
/// features and weights.
pub fn gen_linear_data(
    n: usize,
    d: usize,
    noise: NoiseRule,
    test_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 {
        return config_err(format!("n must be at least 2, got {n}"));
    }
    if d == 0 {
        return config_err("d must be positive");
    }
    split_counts(n, test_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_star: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let features = Matrix::new(n, d, x)?;
    let sd = noise.variance(d).sqrt();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            super::matrix::dot(features.row(i), &w_star) + sd * e
        })
        .collect();
    let (train, test) = split(features, Targets::Real(y), test_fraction, &mut rng)?;
    Ok(Dataset {
        train,
        test,
        seed,
        classes: None,
        w_star: Some(w_star),
        noise_variance: Some(noise.variance(d)),
        class_means: None,
    })
}

/// Gaussian clusters, one per class, with unit within-class variance. Each
/// centre is a random direction scaled to norm `separation`.
pub fn gen_multiclass_data(
    n: usize,
    d_raw: usize,
    classes: usize,
    separation: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return config_err(format!("classes must be at least 2, got {classes}"));
    }
    if d_raw == 0 || n < classes {
        return config_err(format!("need d_raw >= 1 and n >= classes, got d_raw={d_raw}, n={n}"));
    }
    if !(separation >= 0.0) {
        return config_err(format!("separation must be nonnegative, got {separation}"));
    }
    split_counts(n, test_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Matrix::zeros(classes, d_raw);
    for c in 0..classes {
        let dir: Vec<f64> = (0..d_raw).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = super::matrix::norm_sq(&dir).sqrt().max(f64::MIN_POSITIVE);
        for (m, v) in means.row_mut(c).iter_mut().zip(&dir) {
            *m = separation * v / norm;
        }
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut x = Vec::with_capacity(n * d_raw);
    for &y in &labels {
        for &m in means.row(y) {
            let e: f64 = StandardNormal.sample(&mut rng);
            x.push(m + e);
        }
    }
    let features = Matrix::new(n, d_raw, x)?;
    let (train, test) = split(features, Targets::Labels(labels), test_fraction, &mut rng)?;
    Ok(Dataset {
        train,
        test,
        seed,
        classes: Some(classes),
        w_star: None,
        noise_variance: None,
        class_means: Some(means),
    })
}

/// Accuracy of the classifier that assigns each row to the nearest true
/// cluster centre (ties go to the lowest class).
pub fn nearest_mean_accuracy(split: &Split, means: &Matrix) -> f64 {
    let Some(labels) = split.labels() else {
        return f64::NAN;
    };
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let x = split.features.row(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..means.rows() {
                let d: f64 = x.iter().zip(means.row(c)).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0 == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Degree-2 interaction expansion: original columns followed by `x_a * x_b`
/// for every `a < b`, in lexicographic order. Columns with a single unique
/// value in the fitting matrix are removed.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionFeatures {
    input_cols: usize,
    keep: Vec<usize>,
}

impl InteractionFeatures {
    pub fn fit(m: &Matrix, degree: usize) -> Result<Self> {
        if degree != 2 {
            return config_err(format!("only degree 2 interactions are supported, got {degree}"));
        }
        let expanded = expand(m);
        let keep = (0..expanded.cols())
            .filter(|&j| {
                let mut col = expanded.column(j);
                match col.next() {
                    Some(first) => col.any(|v| v != first),
                    None => false,
                }
            })
            .collect();
        Ok(Self {
            input_cols: m.cols(),
            keep,
        })
    }

    pub fn output_cols(&self) -> usize {
        self.keep.len()
    }

    pub fn transform(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.input_cols {
            return config_err(format!(
                "expansion fitted on {} columns, got {}",
                self.input_cols,
                m.cols()
            ));
        }
        Ok(expand(m).select_columns(&self.keep))
    }
}

fn expand(m: &Matrix) -> Matrix {
    let d = m.cols();
    let out_cols = d + d * d.saturating_sub(1) / 2;
    let mut data = Vec::with_capacity(m.rows() * out_cols);
    for i in 0..m.rows() {
        let r = m.row(i);
        data.extend_from_slice(r);
        for a in 0..d {
            for b in a + 1..d {
                data.push(r[a] * r[b]);
            }
        }
    }
    Matrix::new(m.rows(), out_cols, data).expect("sizes agree")
}

pub fn polynomial_features(m: &Matrix, degree: usize) -> Result<Matrix> {
    InteractionFeatures::fit(m, degree)?.transform(m)
}

/// Expands both splits of a dataset, fitting the constant-column filter on
/// the training split.
pub fn with_interactions(ds: Dataset) -> Result<Dataset> {
    let exp = InteractionFeatures::fit(&ds.train.features, 2)?;
    let train = exp.transform(&ds.train.features)?;
    let test = exp.transform(&ds.test.features)?;
    Ok(Dataset {
        train: Split {
            features: train,
            ..ds.train
        },
        test: Split {
            features: test,
            ..ds.test
        },
        class_means: None,
        ..ds
    })
}

/// Multiplies column `j` of both splits by `10^(−decades·j/(d−1))`, so the
/// column scales span `decades` orders of magnitude. Signal carried by the
/// small columns then sits in low-curvature directions, which makes the
/// objective ill-conditioned. Class means are scaled the same way.
pub fn grade_column_scales(ds: Dataset, decades: f64) -> Result<Dataset> {
    if !decades.is_finite() || decades < 0.0 {
        return config_err(format!("decades must be finite and non-negative, got {decades}"));
    }
    let d = ds.dim();
    let scales: Vec<f64> = (0..d)
        .map(|j| if d > 1 { 10f64.powf(-decades * j as f64 / (d - 1) as f64) } else { 1.0 })
        .collect();
    let apply = |m: &Matrix| {
        let mut m = m.clone();
        for i in 0..m.rows() {
            for (v, s) in m.row_mut(i).iter_mut().zip(&scales) {
                *v *= s;
            }
        }
        m
    };
    let class_means = ds.class_means.as_ref().map(apply);
    Ok(Dataset {
        class_means,
        ..ds.map_features(apply)
    })
}

/// Loads a labelled CSV with a header row and the label in the last column.
///
/// Labels are mapped to `0..C` in sorted order of their distinct values.
/// Columns holding values other than 0 and 1 are treated as continuous and
/// standardized to zero mean and unit variance; indicator columns are left
/// as they are.
pub fn load_labelled_csv(path: &Path, test_fraction: f64, seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return config_err(format!("row {} has fewer than two columns", line + 1));
        }
        let mut vals = Vec::with_capacity(rec.len() - 1);
        for field in rec.iter().take(rec.len() - 1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                crate::Error::Config(format!("row {}: cannot parse '{field}' as a number", line + 1))
            })?;
            vals.push(v);
        }
        let label = rec[rec.len() - 1].trim();
        let label: i64 = label.parse().map_err(|_| {
            crate::Error::Config(format!("row {}: label '{label}' is not an integer", line + 1))
        })?;
        rows.push(vals);
        raw_labels.push(label);
    }
    if rows.len() < 2 {
        return config_err("csv holds fewer than two rows");
    }
    let mut features = Matrix::from_rows(&rows)?;
    standardize_continuous(&mut features);
    let mut distinct = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return config_err("csv labels take a single value");
    }
    let labels = raw_labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("label present"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = split(features, Targets::Labels(labels), test_fraction, &mut rng)?;
    Ok(Dataset {
        train,
        test,
        seed,
        classes: Some(distinct.len()),
        w_star: None,
        noise_variance: None,
        class_means: None,
    })
}

fn standardize_continuous(m: &mut Matrix) {
    let n = m.rows() as f64;
    for j in 0..m.cols() {
        if m.column(j).all(|v| v == 0.0 || v == 1.0) {
            continue;
        }
        let mean = m.column(j).sum::<f64>() / n;
        let var = m.column(j).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..m.rows() {
            let v = &mut m.row_mut(i)[j];
            *v = (*v - mean) / sd;
        }
    }
}
