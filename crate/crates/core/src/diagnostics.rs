//! Gradient diversity, gradient moments, minibatch variance and the bounds
//! that tie them to the loss gap and the distance to the optimum.

use std::io::Write;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::RunTrace;
use crate::error::{config_err, Error, Result};
use crate::problems::{erm_reference, norm_sq, Problem, ProblemKind};
use crate::schedules::FunctionClass;

/// Below this full-gradient norm the diversity is treated as undefined.
pub const STATIONARY_NORM: f64 = 1e-10;

/// Relative slack allowed for round-off when checking a bound.
const BOUND_RTOL: f64 = 1e-10;

pub const DIAGNOSTICS_HEADER: [&str; 11] = [
    "k",
    "M_sq",
    "grad_norm_sq",
    "diversity",
    "lower_bound",
    "upper_bound_sc",
    "upper_bound_pl",
    "var_closed",
    "var_bound",
    "stationary",
    "violations",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    /// Strong-convexity / PL constant; zero when the Hessian is singular.
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Extremes of `M²` over recorded iterates, filled in after a run.
    pub m_lower_sq: Option<f64>,
    pub m_upper_sq: Option<f64>,
    pub f_star: f64,
    pub dist0_sq: Option<f64>,
    pub w_star: Option<Vec<f64>>,
}

impl ProblemConstants {
    /// Constants for a problem whose curvature and optimum are unknown: only
    /// `F*` is set, so diagnostics report moments and variance but no
    /// diversity bounds.
    pub fn without_curvature(f_star: f64) -> Self {
        Self {
            alpha: 0.0,
            beta: f64::INFINITY,
            kappa: f64::INFINITY,
            m_lower_sq: None,
            m_upper_sq: None,
            f_star,
            dist0_sq: None,
            w_star: None,
        }
    }

    /// Copy with `M_L²`, `M_U²` set from the given iterates.
    pub fn with_moments(mut self, problem: &Problem, iterates: &[&[f64]]) -> Result<Self> {
        let (lo, hi) = moment_extremes(problem, iterates)?;
        self.m_lower_sq = Some(lo);
        self.m_upper_sq = Some(hi);
        Ok(self)
    }

    pub fn with_start(mut self, w0: &[f64]) -> Self {
        self.dist0_sq = self.dist_sq(w0);
        self
    }

    /// `‖w − w*‖²` when the optimum is known.
    pub fn dist_sq(&self, w: &[f64]) -> Option<f64> {
        self.w_star
            .as_ref()
            .map(|s| w.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// Result of [`minibatch_variance_mc`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub w: Vec<f64>,
    pub batch: u64,
    pub empirical: f64,
    pub closed_form: f64,
    /// `(F(w) − F*) M_U² / c` when those inputs were supplied.
    pub lemma1_bound: Option<f64>,
    pub trials: u64,
    pub std_err: f64,
}

/// Inputs of the variance bound for the loss-adaptive batch rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceBoundInputs {
    pub f_star: f64,
    pub m_upper_sq: f64,
    pub c: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityBounds {
    pub lower: f64,
    pub upper_sc: f64,
    pub upper_pl: f64,
}

/// `M²(w) = (1/n) Σ ‖∇f_i(w)‖²`.
pub fn m_squared(problem: &Problem, w: &[f64]) -> Result<f64> {
    let g = problem.per_example_grads(w)?;
    let n = g.rows();
    Ok((0..n).map(|i| norm_sq(g.row(i))).sum::<f64>() / n as f64)
}

/// `Σ ‖∇f_i‖² / ‖Σ ∇f_i‖²`, computed from the per-example gradients.
pub fn gradient_diversity(problem: &Problem, w: &[f64]) -> Result<f64> {
    let g = problem.per_example_grads(w)?;
    let mut sum = vec![0.0; g.cols()];
    let mut sq = 0.0;
    for i in 0..g.rows() {
        let row = g.row(i);
        sq += norm_sq(row);
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let denom = norm_sq(&sum);
    if denom.sqrt() < STATIONARY_NORM * g.rows() as f64 {
        return Err(Error::Stationary);
    }
    Ok(sq / denom)
}

/// Same quantity from moments: `M² / (n ‖∇F‖²)`.
pub fn diversity_from_moments(m_sq: f64, grad_norm_sq: f64, n: usize) -> Result<f64> {
    if grad_norm_sq.sqrt() < STATIONARY_NORM {
        return Err(Error::Stationary);
    }
    Ok(m_sq / (n as f64 * grad_norm_sq))
}

/// Expected `‖∇F(w) − g‖²` for a with-replacement batch of size `b`:
/// `(M²(w) − ‖∇F(w)‖²) / b`.
pub fn minibatch_variance_closed_form(problem: &Problem, w: &[f64], b: u64) -> Result<f64> {
    if b == 0 {
        return config_err("batch size must be at least 1");
    }
    let m_sq = m_squared(problem, w)?;
    let g = norm_sq(&problem.grad_full(w)?);
    Ok(((m_sq - g) / b as f64).max(0.0))
}

/// Right-hand side of the variance bound: `(F − F*) M_U² / c`.
pub fn lemma1_bound(loss_gap: f64, m_upper_sq: f64, c: f64) -> f64 {
    loss_gap * m_upper_sq / c
}

/// Monte-Carlo estimate of `E‖∇F(w) − g‖²` over independently drawn
/// with-replacement batches. Trial `t` draws from its own stream of the
/// seeded generator, so the result does not depend on thread scheduling.
/// A batch equal to `n` uses the full index set, as the engine does.
pub fn minibatch_variance_mc(
    problem: &Problem,
    w: &[f64],
    b: u64,
    trials: u64,
    seed: u64,
    bound: Option<VarianceBoundInputs>,
) -> Result<VarianceReport> {
    if trials < 100 {
        return config_err(format!("need at least 100 trials, got {trials}"));
    }
    let closed_form = minibatch_variance_closed_form(problem, w, b)?;
    let full = problem.grad_full(w)?;
    let n = problem.n_train();
    let bs = b as usize;
    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut out = vec![0.0; full.len()];
            if bs == n {
                problem.accumulate(w, 0..n, n, &mut out);
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t);
                let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..n)).collect();
                problem.accumulate(w, idx.into_iter(), bs, &mut out);
            }
            out.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum()
        })
        .collect();
    let m = trials as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1.0);
    let lemma1_bound = match bound {
        Some(l) => Some(lemma1_bound(problem.loss_full(w)? - l.f_star, l.m_upper_sq, l.c)),
        None => None,
    };
    Ok(VarianceReport {
        w: w.to_vec(),
        batch: b,
        empirical: mean,
        closed_form,
        lemma1_bound,
        trials,
        std_err: (var / m).sqrt(),
    })
}

/// Smallest and largest `M²` over the iterates.
pub fn moment_extremes(problem: &Problem, iterates: &[&[f64]]) -> Result<(f64, f64)> {
    if iterates.is_empty() {
        return config_err("no iterates to measure");
    }
    let values = iterates
        .par_iter()
        .map(|w| m_squared(problem, w))
        .collect::<Result<Vec<_>>>()?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

/// Bounds on the diversity from smoothness (lower) and strong convexity or
/// PL (upper):
///
/// * lower: `M_L² / (β² n ‖w − w*‖²)`
/// * upper_sc: `M_U² / (α² n ‖w − w*‖²)`
/// * upper_pl: `M_U² / (2 α n (F − F*))`
pub fn diversity_bounds(
    constants: &ProblemConstants,
    n: usize,
    dist_sq: f64,
    loss_gap: f64,
) -> Result<DiversityBounds> {
    let (Some(ml), Some(mu)) = (constants.m_lower_sq, constants.m_upper_sq) else {
        return config_err("diversity bounds need M_L^2 and M_U^2");
    };
    if !(dist_sq > 0.0) || !(loss_gap > 0.0) {
        return config_err("diversity bounds need a positive distance and loss gap");
    }
    let n = n as f64;
    let a = constants.alpha;
    Ok(DiversityBounds {
        lower: ml / (constants.beta * constants.beta * n * dist_sq),
        upper_sc: mu / (a * a * n * dist_sq),
        upper_pl: mu / (2.0 * a * n * loss_gap),
    })
}

/// Curvature constants of a least-squares problem from the eigenvalues of
/// `H = (2/n) XᵀX + λI`, with the optimum from the exact solver.
pub fn quadratic_constants(problem: &Problem) -> Result<ProblemConstants> {
    if problem.kind() != ProblemKind::LeastSquares {
        return config_err("quadratic constants need a least-squares problem");
    }
    let x = problem.dataset().train.features.to_dmatrix();
    let n = x.nrows() as f64;
    let mut h = x.tr_mul(&x) * (2.0 / n);
    for i in 0..h.nrows() {
        h[(i, i)] += problem.weight_decay();
    }
    let eig = SymmetricEigen::new(h);
    let beta = eig.eigenvalues.max();
    let mut alpha = eig.eigenvalues.min();
    if alpha <= beta * f64::EPSILON * eig.eigenvalues.len() as f64 {
        alpha = 0.0;
    }
    let erm = erm_reference(problem)?;
    Ok(ProblemConstants {
        alpha,
        beta,
        kappa: beta / alpha,
        m_lower_sq: None,
        m_upper_sq: None,
        f_star: erm.train_loss,
        dist0_sq: None,
        w_star: Some(erm.weights),
    })
}

/// Gradient computations sufficient to reach accuracy `eps` (natural log):
///
/// * PL: `4 c r ln(1/ε) / ε`
/// * convex: `4 c r / ε²`
/// * smooth: `4 c r / ε³`
pub fn gradient_computation_budget(class: FunctionClass, c: f64, r: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return config_err("budget needs eps > 0");
    }
    Ok(match class {
        FunctionClass::Pl => 4.0 * c * r * (1.0 / eps).ln() / eps,
        FunctionClass::Convex => 4.0 * c * r / (eps * eps),
        FunctionClass::Smooth => 4.0 * c * r / (eps * eps * eps),
    })
}

/// Examples processed by `t` updates of the loss-adaptive rule while the gap
/// stays above `eps`: `4 B₀ δ₀ T / ε`.
pub fn examples_budget(b0: u64, delta0: f64, t: u64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return config_err("budget needs eps > 0");
    }
    Ok(4.0 * b0 as f64 * delta0 * t as f64 / eps)
}

/// Diagnostics at one recorded iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub k: u64,
    pub m_sq: f64,
    pub grad_norm_sq: f64,
    /// `None` at a stationary point.
    pub diversity: Option<f64>,
    pub lower_bound: Option<f64>,
    pub upper_bound_sc: Option<f64>,
    pub upper_bound_pl: Option<f64>,
    /// Closed-form variance of the batch drawn at this iterate.
    pub var_closed: Option<f64>,
    /// `(F − F*) M_U² / c`, for runs with an adaptive constant.
    pub var_bound: Option<f64>,
    pub stationary: bool,
    /// Bounds (diversity and variance) that fail at this iterate.
    pub violations: u32,
}

/// Evaluates every snapshot of `trace`. `M_L²`/`M_U²` come from `constants`
/// when set, otherwise from the snapshots themselves. The batch of snapshot
/// `k` is the one used by update `k + 1`; a batch of `n` is a full-batch step
/// and has zero variance.
pub fn diagnose_trace(
    problem: &Problem,
    trace: &RunTrace,
    constants: &ProblemConstants,
) -> Result<Vec<DiagnosticRow>> {
    if trace.snapshots.is_empty() {
        return config_err("trace has no weight snapshots to diagnose");
    }
    if trace.n_train != problem.n_train() {
        return Err(Error::Config(format!(
            "trace was recorded on {} examples, problem has {}",
            trace.n_train,
            problem.n_train()
        )));
    }
    let mut consts = constants.clone();
    if consts.m_lower_sq.is_none() || consts.m_upper_sq.is_none() {
        let ws: Vec<&[f64]> = trace.snapshots.iter().map(|s| s.weights.as_slice()).collect();
        consts = consts.with_moments(problem, &ws)?;
    }
    let n = problem.n_train();
    trace
        .snapshots
        .par_iter()
        .map(|snap| {
            let w = &snap.weights;
            problem.check_weights(w)?;
            let m_sq = m_squared(problem, w)?;
            let grad_norm_sq = norm_sq(&problem.grad_full(w)?);
            let loss = problem.loss_full(w)?;
            let stationary = grad_norm_sq.sqrt() < STATIONARY_NORM;
            let mut row = DiagnosticRow {
                k: snap.k,
                m_sq,
                grad_norm_sq,
                diversity: None,
                lower_bound: None,
                upper_bound_sc: None,
                upper_bound_pl: None,
                var_closed: None,
                var_bound: None,
                stationary,
                violations: 0,
            };
            if !stationary {
                let div = m_sq / (n as f64 * grad_norm_sq);
                row.diversity = Some(div);
                let gap = loss - consts.f_star;
                if let Some(dist) = consts.dist_sq(w) {
                    if dist > 0.0 && gap > 0.0 {
                        let b = diversity_bounds(&consts, n, dist, gap)?;
                        row.lower_bound = Some(b.lower);
                        if div < b.lower * (1.0 - BOUND_RTOL) {
                            row.violations += 1;
                        }
                        if consts.alpha > 0.0 {
                            row.upper_bound_sc = Some(b.upper_sc);
                            row.upper_bound_pl = Some(b.upper_pl);
                            if div > b.upper_sc * (1.0 + BOUND_RTOL) {
                                row.violations += 1;
                            }
                            if div > b.upper_pl * (1.0 + BOUND_RTOL) {
                                row.violations += 1;
                            }
                        }
                    }
                }
            }
            if let Some(rec) = trace.records.get(snap.k as usize) {
                let b = rec.batch_size;
                let closed = if b as usize == n {
                    0.0
                } else {
                    ((m_sq - grad_norm_sq) / b as f64).max(0.0)
                };
                row.var_closed = Some(closed);
                if let (Some(c), Some(mu)) = (trace.c, consts.m_upper_sq) {
                    let bound = lemma1_bound(loss - consts.f_star, mu, c);
                    row.var_bound = Some(bound);
                    if closed > bound + 1e-12 {
                        row.violations += 1;
                    }
                }
            }
            Ok(row)
        })
        .collect()
}

pub fn write_diagnostics_csv<W: Write>(rows: &[DiagnosticRow], out: W) -> Result<()> {
    use crate::engine::fmt_f64;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DIAGNOSTICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            fmt_f64(r.m_sq),
            fmt_f64(r.grad_norm_sq),
            opt(r.diversity),
            opt(r.lower_bound),
            opt(r.upper_bound_sc),
            opt(r.upper_bound_pl),
            opt(r.var_closed),
            opt(r.var_bound),
            if r.stationary { "stationary" } else { "" }.to_string(),
            r.violations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{gen_linear_data, Dataset, Matrix, NoiseRule, Split, Targets};

    /// Least squares with examples chosen so that per-example gradients at
    /// `w = 0` are `−2 y_i x_i`.
    fn tiny(rows: &[Vec<f64>], ys: &[f64]) -> Problem {
        let features = Matrix::from_rows(rows).unwrap();
        let d = features.cols();
        let n = features.rows();
        let ds = Dataset {
            train: Split {
                features,
                targets: Targets::Real(ys.to_vec()),
                rows: (0..n).collect(),
            },
            test: Split {
                features: Matrix::zeros(0, d),
                targets: Targets::Real(vec![]),
                rows: vec![],
            },
            seed: 0,
            classes: None,
            w_star: None,
            noise_variance: None,
            class_means: None,
        };
        Problem::new(ds, ProblemKind::LeastSquares, 0.0).unwrap()
    }

    #[test]
    fn moments_and_diversity_by_hand() {
        // gradients at 0: (3,4) and (0,0)
        let p = tiny(&[vec![3.0, 4.0], vec![0.0, 0.0]], &[-0.5, 1.0]);
        assert!((m_squared(&p, &[0.0, 0.0]).unwrap() - 12.5).abs() < 1e-12);
        // gradients (1,0) and (1,1)
        let p = tiny(&[vec![1.0, 0.0], vec![1.0, 1.0]], &[-0.5, -0.5]);
        let div = gradient_diversity(&p, &[0.0, 0.0]).unwrap();
        assert!((div - 0.6).abs() < 1e-12);
    }

    #[test]
    fn diversity_extremes() {
        let same = tiny(&vec![vec![1.0, 2.0]; 4], &[1.0; 4]);
        assert!((gradient_diversity(&same, &[0.0, 0.0]).unwrap() - 0.25).abs() < 1e-12);
        let orth = tiny(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], &[1.0; 3]);
        assert!((gradient_diversity(&orth, &[0.0; 3]).unwrap() - 1.0).abs() < 1e-12);
        let zero = tiny(&[vec![1.0, 0.0]], &[0.0]);
        assert!(matches!(gradient_diversity(&zero, &[0.0, 0.0]), Err(Error::Stationary)));
    }

    #[test]
    fn closed_form_variance_two_points() {
        // gradients (1,0) and (0,1): enumeration gives ‖g₁ − g₂‖²/4 = 0.5
        let p = tiny(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[-0.5, -0.5]);
        let w = [0.0, 0.0];
        let v1 = minibatch_variance_closed_form(&p, &w, 1).unwrap();
        assert!((v1 - 0.5).abs() < 1e-12);
        let v10 = minibatch_variance_closed_form(&p, &w, 10).unwrap();
        assert!((v10 - 0.05).abs() < 1e-12);
        let r = minibatch_variance_mc(&p, &w, 1, 4000, 3, None).unwrap();
        assert!((r.empirical - 0.5).abs() <= 4.0 * r.std_err);
        let full = minibatch_variance_mc(&p, &w, 2, 100, 3, None).unwrap();
        assert_eq!(full.empirical, 0.0);
        let same = tiny(&vec![vec![1.0, 2.0]; 3], &[1.0; 3]);
        assert!(minibatch_variance_closed_form(&same, &w, 1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn variance_bound_plug_in() {
        assert_eq!(lemma1_bound(2.0, 4.0, 8.0), 1.0);
    }

    #[test]
    fn bound_plug_in() {
        let k = ProblemConstants {
            alpha: 1.0,
            beta: 1.0,
            kappa: 1.0,
            m_lower_sq: Some(1.0),
            m_upper_sq: Some(4.0),
            f_star: 0.0,
            dist0_sq: None,
            w_star: None,
        };
        let b = diversity_bounds(&k, 4, 2.0, 1.0).unwrap();
        assert_eq!(b.lower, 0.125);
        assert_eq!(b.upper_sc, 0.5);
        assert_eq!(b.upper_pl, 0.5);
    }

    #[test]
    fn identity_and_shifted_eigenvalues() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let p = tiny(&rows, &[1.0, 2.0, 3.0, 4.0]);
        let k = quadratic_constants(&p).unwrap();
        assert!((k.alpha - 0.5).abs() < 1e-12 && (k.beta - 0.5).abs() < 1e-12);
        let ds = p.dataset().clone();
        let p2 = Problem::new(ds, ProblemKind::LeastSquares, 0.1).unwrap();
        let k2 = quadratic_constants(&p2).unwrap();
        assert!((k2.alpha - 0.6).abs() < 1e-12 && (k2.beta - 0.6).abs() < 1e-12);
    }

    #[test]
    fn budgets_by_hand() {
        let pl = gradient_computation_budget(FunctionClass::Pl, 1.0, 1.0, 0.1).unwrap();
        assert!((pl - 4.0 * 10f64.ln() / 0.1).abs() < 1e-9);
        assert!((pl - 92.103).abs() < 1e-3);
        let cv = gradient_computation_budget(FunctionClass::Convex, 1.0, 1.0, 0.1).unwrap();
        assert!((cv - 400.0).abs() < 1e-9);
        let sm = gradient_computation_budget(FunctionClass::Smooth, 1.0, 1.0, 0.1).unwrap();
        assert!((sm - 4000.0).abs() < 1e-9);
        assert!((examples_budget(2, 8.0, 10, 0.1).unwrap() - 6400.0).abs() < 1e-9);
    }

    #[test]
    fn moment_dominates_gradient_norm() {
        let ds = gen_linear_data(60, 4, NoiseRule::Unit, 0.0, 8).unwrap();
        let p = Problem::new(ds, ProblemKind::LeastSquares, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let m = m_squared(&p, &w).unwrap();
            let g = norm_sq(&p.grad_full(&w).unwrap());
            assert!(m >= g * (1.0 - 1e-12));
            let a = gradient_diversity(&p, &w).unwrap();
            let b = diversity_from_moments(m, g, 60).unwrap();
            assert!((a - b).abs() <= 1e-12 * a);
        }
    }
}
