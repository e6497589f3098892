//! Comparison models: a plain ridge/least-squares predictor and an optimistic
//! single-level Stackelberg surrogate whose lower level is made strictly
//! convex by a proximal pull toward the adversary's origin.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calculus::fd::central_gradient;
use crate::error::{Error, Result};
use crate::model::{upper_objective, Dataset, Weights};
use crate::stationarity::BilevelProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    LinReg,
    Bs,
}

#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub weights: Weights,
}

/// Ordinary least squares with an optional ridge term, via the normal
/// equations `(D^T D + (n/rho) I) w = D^T gamma`.
pub fn fit_linreg(train: &Dataset, ridge: Option<f64>) -> Result<Weights> {
    let n = train.n_rows();
    let q = train.n_features();
    let mut lhs = train.rows.transpose() * &train.rows;
    if let Some(rho) = ridge {
        if rho <= 0.0 {
            return Err(Error::InvalidConfig(format!("ridge rho must be > 0, got {rho}")));
        }
        for k in 0..q {
            lhs[(k, k)] += n as f64 / rho;
        }
    }
    let rhs = train.rows.transpose() * &train.labels;
    let solution = match lhs.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => lhs.lu().solve(&rhs).ok_or_else(|| {
            Error::LinearSolve("normal equations are singular; consider enabling ridge".into())
        })?,
    };
    Ok(Weights(solution))
}

/// Settings for the optimistic surrogate fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BsConfig {
    /// Proximal weight keeping the lower level strictly convex.
    pub rho_a: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for BsConfig {
    fn default() -> Self {
        BsConfig { rho_a: 1.0, max_iter: 2000, grad_tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct BsFit {
    pub weights: Weights,
    pub converged: bool,
    pub iterations: usize,
}

/// Closed-form lower-level response for one row:
/// minimizer of `(w^T x - z)^2 + (rho_a/2) ||x - x0||^2`, which is
/// `x0 + 2 (z - w^T x0) / (rho_a + 2 ||w||^2) * w`.
pub fn bs_lower_response(
    w: &DVector<f64>,
    x0: &DVector<f64>,
    target: f64,
    rho_a: f64,
) -> DVector<f64> {
    let scale = 2.0 * (target - w.dot(x0)) / (rho_a + 2.0 * w.norm_squared());
    x0 + scale * w
}

fn bs_response_matrix(problem: &BilevelProblem, w: &DVector<f64>, rho_a: f64) -> DMatrix<f64> {
    let m = problem.n_adversary();
    let q = problem.n_features();
    let mut x = DMatrix::zeros(m, q);
    for i in 0..m {
        let x0 = problem.adversary.origin.row(i).transpose();
        let xi = bs_lower_response(w, &x0, problem.adversary.target_labels[i], rho_a);
        x.row_mut(i).copy_from(&xi.transpose());
    }
    x
}

fn bs_reduced_objective(problem: &BilevelProblem, w: &DVector<f64>, rho_a: f64) -> f64 {
    let x = bs_response_matrix(problem, w, rho_a);
    let adv = problem
        .adversary
        .clone()
        .with_current(x)
        .expect("response has origin shape");
    upper_objective(&Weights(w.clone()), &adv, &problem.static_data, &problem.config)
        .expect("dimensions fixed by problem")
}

/// Fits the optimistic surrogate: the unique lower-level response is
/// substituted into the upper objective, which is then minimized over the
/// weights by gradient descent with backtracking. Gradients of the reduced
/// objective are taken by central differences (the response is smooth in `w`).
pub fn fit_bs(problem: &BilevelProblem, cfg: &BsConfig) -> Result<BsFit> {
    if cfg.rho_a <= 0.0 {
        return Err(Error::InvalidConfig(format!("rho_a must be > 0, got {}", cfg.rho_a)));
    }
    let mut w = fit_linreg(&problem.static_data, problem.config.ridge)?.0;
    let objective = |wv: &DVector<f64>| bs_reduced_objective(problem, wv, cfg.rho_a);

    let mut value = objective(&w);
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..cfg.max_iter {
        iterations = k;
        let grad = central_gradient(&objective, &w, 1e-6);
        if grad.norm() <= cfg.grad_tol {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let slope = -grad.norm_squared();
        let mut stepped = false;
        for _ in 0..40 {
            let trial = &w - alpha * &grad;
            let trial_value = objective(&trial);
            if trial_value <= value + 1e-4 * alpha * slope {
                w = trial;
                value = trial_value;
                stepped = true;
                break;
            }
            alpha *= 0.5;
        }
        if !stepped {
            break; // line search bottomed out; return best iterate
        }
    }
    Ok(BsFit { weights: Weights(w), converged, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdversaryBlock, ModelConfig};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linreg_recovers_exact_linear_data() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 1.0, 0.5, 4.0]);
        let w_true = DVector::from_row_slice(&[0.7, -0.3]);
        let labels = &d * &w_true;
        let train = Dataset::new(d, labels).unwrap();
        let w = fit_linreg(&train, None).unwrap();
        assert_relative_eq!(w.0, w_true, epsilon = 1e-10);
    }

    #[test]
    fn linreg_identity_design() {
        let d = DMatrix::identity(3, 3);
        let labels = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let train = Dataset::new(d, labels).unwrap();
        let w = fit_linreg(&train, None).unwrap();
        assert_relative_eq!(w.0, DVector::from_row_slice(&[1.0, 0.0, 0.0]), epsilon = 1e-12);
    }

    #[test]
    fn linreg_matches_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let q = 3;
        let rho = 50.0;
        let d = DMatrix::from_fn(n, q, |_, _| rng.random_range(0.1..1.0));
        let gamma = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
        let train = Dataset::new(d.clone(), gamma.clone()).unwrap();
        let w = fit_linreg(&train, Some(rho)).unwrap();

        // Independent elementwise assembly of the normal equations.
        let mut lhs = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        for k in 0..q {
            for c in 0..q {
                lhs[(k, c)] = (0..n).map(|i| d[(i, k)] * d[(i, c)]).sum();
            }
            lhs[(k, k)] += n as f64 / rho;
            rhs[k] = (0..n).map(|i| d[(i, k)] * gamma[i]).sum();
        }
        let oracle = lhs.lu().solve(&rhs).unwrap();
        assert_relative_eq!(w.0, oracle, epsilon = 1e-10);
    }

    #[test]
    fn linreg_gradient_vanishes_at_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = DMatrix::from_fn(5, 3, |_, _| rng.random_range(0.1..1.0));
        let gamma = DVector::from_fn(5, |_, _| rng.random_range(0.1..1.0));
        let train = Dataset::new(d.clone(), gamma.clone()).unwrap();
        let rho = 100.0;
        let w = fit_linreg(&train, Some(rho)).unwrap();
        let grad = d.transpose() * (&d * &w.0 - &gamma) * (2.0 / 5.0) + &w.0 * (2.0 / rho);
        assert!(grad.norm() <= 1e-8, "gradient norm {}", grad.norm());
    }

    fn toy_problem(rng: &mut ChaCha8Rng, n: usize, m: usize, q: usize, ridge: Option<f64>) -> BilevelProblem {
        let d = DMatrix::from_fn(n, q, |_, _| rng.random_range(0.1..1.0));
        let gamma = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
        let origin = DMatrix::from_fn(m, q, |_, _| rng.random_range(0.1..1.0));
        let y = DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0));
        let adv = AdversaryBlock::new(origin, y, 0.2).unwrap();
        let data = Dataset::new(d, gamma).unwrap();
        BilevelProblem::new(data, adv, ModelConfig { delta: 0.95, ridge, nu: 0.2 }).unwrap()
    }

    #[test]
    fn bs_lower_response_scalar_closed_form() {
        // q = 1: x* = (rho_a x0 + 2 z w) / (rho_a + 2 w^2).
        let w = DVector::from_row_slice(&[1.5]);
        let x0 = DVector::from_row_slice(&[0.4]);
        let (z, rho_a) = (2.0, 0.7);
        let x = bs_lower_response(&w, &x0, z, rho_a);
        let expected = (rho_a * 0.4 + 2.0 * z * 1.5) / (rho_a + 2.0 * 1.5 * 1.5);
        assert_relative_eq!(x[0], expected, max_relative = 1e-12);
    }

    #[test]
    fn bs_lower_response_matches_numerical_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let q = 3;
            let w = DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0));
            let x0 = DVector::from_fn(q, |_, _| rng.random_range(0.1..1.0));
            let z: f64 = rng.random_range(0.0..2.0);
            let rho_a = rng.random_range(0.5..3.0);
            let x_star = bs_lower_response(&w, &x0, z, rho_a);

            // Plain gradient descent on the proximal objective.
            let objective = |x: &DVector<f64>| {
                (w.dot(x) - z).powi(2) + 0.5 * rho_a * (x - &x0).norm_squared()
            };
            let mut x = x0.clone();
            for _ in 0..50_000 {
                let grad = 2.0 * (w.dot(&x) - z) * &w + rho_a * (&x - &x0);
                if grad.norm() < 1e-12 {
                    break;
                }
                x -= 0.05 * grad;
            }
            assert!(
                (objective(&x_star) - objective(&x)).abs() <= 1e-8,
                "closed form {} vs numeric {}",
                objective(&x_star),
                objective(&x)
            );
        }
    }

    #[test]
    fn bs_lower_system_is_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let w = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let rho_a: f64 = rng.random_range(0.01..5.0);
            let system: DMatrix<f64> =
                2.0 * &w * w.transpose() + rho_a * DMatrix::identity(3, 3);
            let eig = system.symmetric_eigenvalues();
            for i in 0..3 {
                assert!(eig[i] > 0.0);
            }
        }
    }

    #[test]
    fn bs_with_huge_proximal_weight_matches_linreg() {
        // rho_a -> infinity pins the lower level at the origin, so the fit
        // reduces to least squares on the combined rows. Using n = m and no
        // ridge makes the block weighting uniform.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let problem = toy_problem(&mut rng, 3, 3, 2, None);
        let fit = fit_bs(&problem, &BsConfig { rho_a: 1e8, ..Default::default() }).unwrap();

        let mut rows = DMatrix::zeros(6, 2);
        rows.rows_mut(0, 3).copy_from(&problem.static_data.rows);
        rows.rows_mut(3, 3).copy_from(&problem.adversary.origin);
        let mut labels = DVector::zeros(6);
        labels.rows_mut(0, 3).copy_from(&problem.static_data.labels);
        labels.rows_mut(3, 3).copy_from(&problem.adversary.true_labels);
        let combined = Dataset::new(rows, labels).unwrap();
        let reference = fit_linreg(&combined, None).unwrap();

        assert!(
            (&fit.weights.0 - &reference.0).norm() <= 1e-3,
            "difference {}",
            (&fit.weights.0 - &reference.0).norm()
        );
    }
}
