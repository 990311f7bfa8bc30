use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{dot, Problem, ProblemKind, Split};
use crate::error::{config_err, Result};

/// Linear least-squares fit on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErmReference {
    /// Linear weights (length d), not shaped like a `LinearNet`.
    pub weights: Vec<f64>,
    /// For `LeastSquares` this is `F(w)` including the ridge term, i.e. `F*`.
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    /// The design had numerical rank below `d`; the minimum-norm solution
    /// was returned.
    pub rank_deficient: bool,
}

/// Solves the linear ERM problem with an SVD. For `LeastSquares` the
/// problem's ridge term is included so `train_loss` is the exact optimum
/// of the objective; for `LinearNet` the plain linear fit is returned.
pub fn erm_reference(problem: &Problem) -> Result<ErmReference> {
    let decay = match problem.kind() {
        ProblemKind::LeastSquares => problem.weight_decay(),
        ProblemKind::LinearNet => 0.0,
        ProblemKind::MulticlassLogistic => {
            return config_err("the linear ERM reference needs a regression problem")
        }
    };
    let train = &problem.dataset().train;
    let n = train.len();
    let d = problem.dim();
    let y = train.real_targets().expect("regression targets");

    // min (1/n)‖y − Xw‖² + (λ/2)‖w‖²  ==  min ‖[X; √(nλ/2) I] w − [y; 0]‖²
    let extra = if decay > 0.0 { d } else { 0 };
    let mut a = DMatrix::<f64>::zeros(n + extra, d);
    a.rows_mut(0, n).copy_from(&train.features.to_dmatrix());
    let mut b = DVector::<f64>::zeros(n + extra);
    b.rows_mut(0, n).copy_from_slice(y);
    if extra > 0 {
        let s = (n as f64 * decay / 2.0).sqrt();
        for j in 0..d {
            a[(n + j, j)] = s;
        }
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n + extra).max(d) as f64 * f64::EPSILON;
    let rank = svd.rank(tol);
    let w = svd
        .solve(&b, tol)
        .map_err(|e| crate::Error::Config(format!("least-squares solve failed: {e}")))?;
    let weights: Vec<f64> = w.iter().copied().collect();

    let train_loss = mse(train, &weights) + 0.5 * decay * dot(&weights, &weights);
    let test = &problem.dataset().test;
    let test_loss = (!test.is_empty()).then(|| mse(test, &weights));
    Ok(ErmReference {
        weights,
        train_loss,
        test_loss,
        rank_deficient: rank < d,
    })
}

fn mse(split: &Split, w: &[f64]) -> f64 {
    let y = split.real_targets().expect("regression targets");
    let n = split.len() as f64;
    (0..split.len())
        .map(|i| (y[i] - dot(split.features.row(i), w)).powi(2))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{gen_linear_data, Dataset, Matrix, NoiseRule, Targets};

    fn dataset(rows: &[Vec<f64>], y: Vec<f64>) -> Dataset {
        let features = Matrix::from_rows(rows).unwrap();
        let n = features.rows();
        Dataset {
            train: Split {
                features,
                targets: Targets::Real(y),
                rows: (0..n).collect(),
            },
            test: Split {
                features: Matrix::zeros(0, rows[0].len()),
                targets: Targets::Real(vec![]),
                rows: vec![],
            },
            seed: 0,
            classes: None,
            w_star: None,
            noise_variance: None,
            class_means: None,
        }
    }

    #[test]
    fn two_points_on_a_line() {
        let p = Problem::new(
            dataset(&[vec![1.0], vec![2.0]], vec![1.0, 2.0]),
            ProblemKind::LeastSquares,
            0.0,
        )
        .unwrap();
        let r = erm_reference(&p).unwrap();
        assert!((r.weights[0] - 1.0).abs() < 1e-12);
        assert!(r.train_loss < 1e-24);
        assert!(!r.rank_deficient);
        assert_eq!(r.test_loss, None);
    }

    #[test]
    fn zero_noise_interpolates() {
        let ds = gen_linear_data(200, 10, NoiseRule::Zero, 0.1, 4).unwrap();
        let y = ds.train.real_targets().unwrap().to_vec();
        let p = Problem::new(ds, ProblemKind::LeastSquares, 0.0).unwrap();
        let r = erm_reference(&p).unwrap();
        let ysq: f64 = y.iter().map(|v| v * v).sum();
        assert!(r.train_loss <= 1e-16 * (1.0 + ysq), "{}", r.train_loss);
    }

    #[test]
    fn rank_deficient_design_is_flagged() {
        let p = Problem::new(
            dataset(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]], vec![2.0, 4.0, 6.0]),
            ProblemKind::LeastSquares,
            0.0,
        )
        .unwrap();
        let r = erm_reference(&p).unwrap();
        assert!(r.rank_deficient);
        // minimum-norm solution splits the weight evenly
        assert!((r.weights[0] - 1.0).abs() < 1e-10 && (r.weights[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn residual_variance_matches_noise() {
        let ds = gen_linear_data(10_000, 100, NoiseRule::DimensionScaled, 0.2, 8).unwrap();
        let p = Problem::new(ds, ProblemKind::LeastSquares, 0.0).unwrap();
        let r = erm_reference(&p).unwrap();
        assert!((r.train_loss - 1.0).abs() < 0.05, "{}", r.train_loss);
    }

    #[test]
    fn logistic_is_rejected() {
        let ds = crate::problems::gen_multiclass_data(20, 2, 2, 1.0, 0.0, 0).unwrap();
        let p = Problem::new(ds, ProblemKind::MulticlassLogistic, 0.0).unwrap();
        assert!(erm_reference(&p).is_err());
    }
}
