//! Analytic first and second derivatives of the objectives and constraints,
//! plus a central finite-difference checker used by tests and the
//! `check-derivatives` CLI subcommand.
//!
//! Conventions:
//! - The adversary's data `X` is an `m x q` matrix; where a derivative runs
//!   over all of `X` it is flattened row-major, so entry `(i, j)` of `X` maps
//!   to flat index `i * q + j`.
//! - Constraint derivatives are derivatives of `g_i = delta - cos(X_i, X0_i)`,
//!   i.e. the *negative* of the cosine's derivative. The finite-difference
//!   suite is the arbiter for all sign conventions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{AdversaryBlock, Dataset, ModelConfig, Weights};

/// Gradient of the upper objective with respect to the weights:
/// `(2/n) D^T (Dw - gamma) + (2/m) X^T (Xw - Y) + (2/rho) w`.
pub fn grad_upper_w(
    w: &Weights,
    adversary: &AdversaryBlock,
    static_data: &Dataset,
    cfg: &ModelConfig,
) -> Result<DVector<f64>> {
    let q = w.len();
    if static_data.n_features() != q || adversary.n_features() != q {
        return Err(Error::dims("grad_upper_w features", q, static_data.n_features()));
    }
    let n = static_data.n_rows() as f64;
    let m = adversary.n_rows() as f64;
    let static_res = &static_data.rows * &w.0 - &static_data.labels;
    let adv_res = &adversary.current * &w.0 - &adversary.true_labels;
    let mut grad = static_data.rows.transpose() * static_res * (2.0 / n)
        + adversary.current.transpose() * adv_res * (2.0 / m);
    if let Some(rho) = cfg.ridge {
        grad += &w.0 * (2.0 / rho);
    }
    Ok(grad)
}

/// Hessian of the upper objective in the weights:
/// `(2/n) D^T D + (2/m) X^T X + (2/rho) I`.
pub fn hess_upper_ww(
    static_rows: &DMatrix<f64>,
    adv_rows: &DMatrix<f64>,
    ridge: Option<f64>,
) -> Result<DMatrix<f64>> {
    let q = static_rows.ncols();
    if adv_rows.ncols() != q {
        return Err(Error::dims("hess_upper_ww features", q, adv_rows.ncols()));
    }
    let n = static_rows.nrows().max(1) as f64;
    let m = adv_rows.nrows().max(1) as f64;
    let mut h = static_rows.transpose() * static_rows * (2.0 / n)
        + adv_rows.transpose() * adv_rows * (2.0 / m);
    if let Some(rho) = ridge {
        for k in 0..q {
            h[(k, k)] += 2.0 / rho;
        }
    }
    Ok(h)
}

fn grad_wrt_rows(
    w: &Weights,
    rows: &DMatrix<f64>,
    labels: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (m, q) = rows.shape();
    if w.len() != q {
        return Err(Error::dims("row gradient features", q, w.len()));
    }
    let residual = rows * &w.0 - labels;
    let mut out = DMatrix::zeros(m, q);
    for i in 0..m {
        for j in 0..q {
            out[(i, j)] = 2.0 / m as f64 * w.0[j] * residual[i];
        }
    }
    Ok(out)
}

/// Gradient of the upper objective in the adversary's data:
/// entry `(i, j)` is `(2/m) w_j (w^T X_i - Y_i)`.
pub fn grad_upper_x(w: &Weights, adversary: &AdversaryBlock) -> Result<DMatrix<f64>> {
    grad_wrt_rows(w, &adversary.current, &adversary.true_labels)
}

/// Gradient of the lower objective in the adversary's data:
/// entry `(i, j)` is `(2/m) w_j (w^T X_i - Z_i)`.
pub fn grad_lower_x(w: &Weights, adversary: &AdversaryBlock) -> Result<DMatrix<f64>> {
    grad_wrt_rows(w, &adversary.current, &adversary.target_labels)
}

/// Per-row Hessian block of the lower objective in the data: `(2/m) w w^T`.
/// Cross-row blocks are identically zero, so a single block describes the
/// whole block-diagonal Hessian.
pub fn hess_lower_xx_block(w: &Weights, m: usize) -> DMatrix<f64> {
    (2.0 / m as f64) * &w.0 * w.0.transpose()
}

fn cross_wx(w: &Weights, rows: &DMatrix<f64>, labels: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (m, q) = rows.shape();
    if w.len() != q {
        return Err(Error::dims("cross derivative features", q, w.len()));
    }
    let residual = rows * &w.0 - labels;
    // Rows index the weight k, columns the flattened data entry (i, j).
    let mut out = DMatrix::zeros(q, m * q);
    for k in 0..q {
        for i in 0..m {
            for j in 0..q {
                let mut v = w.0[j] * rows[(i, k)];
                if j == k {
                    v += residual[i];
                }
                out[(k, i * q + j)] = 2.0 / m as f64 * v;
            }
        }
    }
    Ok(out)
}

/// Mixed derivative of the lower objective: row `k` (weight), column `i*q+j`
/// (data entry) holds `(2/m) [1{j=k} (w^T X_i - Z_i) + w_j X_{ik}]`.
pub fn cross_lower_wx(w: &Weights, adversary: &AdversaryBlock) -> Result<DMatrix<f64>> {
    cross_wx(w, &adversary.current, &adversary.target_labels)
}

/// Mixed derivative of the upper objective's adversary term, same shape as
/// [`cross_lower_wx`] but with the true labels in the residual.
pub fn cross_upper_wx(w: &Weights, adversary: &AdversaryBlock) -> Result<DMatrix<f64>> {
    cross_wx(w, &adversary.current, &adversary.true_labels)
}

/// Gradient of a single constraint `g_i = delta - cos(x, x0)` in `x`:
/// component `k` is `d(x, x0) x_k / ||x||^2 - x0_k / (||x|| ||x0||)`.
pub fn grad_constraint_row(x: &DVector<f64>, x0: &DVector<f64>) -> Result<DVector<f64>> {
    let nx = x.norm();
    let n0 = x0.norm();
    if nx == 0.0 || n0 == 0.0 {
        return Err(Error::ZeroNormRow { row: 0 });
    }
    let d = x.dot(x0) / (nx * n0);
    Ok(x * (d / (nx * nx)) - x0 / (nx * n0))
}

/// Gradients of all constraints. Row `i` only depends on instance `i`, so the
/// result is the list of per-row dense `q`-blocks; all other entries of the
/// full `m x mq` matrix are zero.
pub fn grad_constraints_x(adversary: &AdversaryBlock) -> Result<Vec<DVector<f64>>> {
    let m = adversary.n_rows();
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let xi = adversary.current.row(i).transpose();
        let oi = adversary.origin.row(i).transpose();
        rows.push(grad_constraint_row(&xi, &oi).map_err(|_| Error::ZeroNormRow { row: i })?);
    }
    Ok(rows)
}

/// Hessian block of a single constraint `g_i` in its own row.
pub fn hess_constraint_block(x: &DVector<f64>, x0: &DVector<f64>) -> Result<DMatrix<f64>> {
    let q = x.len();
    let nx = x.norm();
    let n0 = x0.norm();
    if nx == 0.0 || n0 == 0.0 {
        return Err(Error::ZeroNormRow { row: 0 });
    }
    let d = x.dot(x0) / (nx * n0);
    let nx2 = nx * nx;
    let mut h = DMatrix::zeros(q, q);
    for k in 0..q {
        for c in 0..q {
            let mut v = (x[c] * x0[k] + x[k] * x0[c]) / (nx2 * nx * n0)
                - 3.0 * x[k] * x[c] * d / (nx2 * nx2);
            if k == c {
                v += d / nx2;
            }
            h[(k, c)] = v;
        }
    }
    Ok(h)
}

/// Hessian blocks of all constraints; cross-instance blocks are identically
/// zero.
pub fn hess_constraints_xx(adversary: &AdversaryBlock) -> Result<Vec<DMatrix<f64>>> {
    let m = adversary.n_rows();
    let mut blocks = Vec::with_capacity(m);
    for i in 0..m {
        let xi = adversary.current.row(i).transpose();
        let oi = adversary.origin.row(i).transpose();
        blocks.push(hess_constraint_block(&xi, &oi).map_err(|_| Error::ZeroNormRow { row: i })?);
    }
    Ok(blocks)
}

/// All derivative pieces for one `(w, X)` point, gathered once.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub grad_upper_w: DVector<f64>,
    pub grad_upper_x: DMatrix<f64>,
    pub grad_lower_x: DMatrix<f64>,
    pub hess_upper_ww: DMatrix<f64>,
    /// Shared per-row data Hessian block `(2/m) w w^T`.
    pub hess_lower_xx: DMatrix<f64>,
    pub cross_lower_wx: DMatrix<f64>,
    pub cross_upper_wx: DMatrix<f64>,
    pub grad_constraints: Vec<DVector<f64>>,
    pub hess_constraints: Vec<DMatrix<f64>>,
}

pub fn gradient_bundle(
    w: &Weights,
    adversary: &AdversaryBlock,
    static_data: &Dataset,
    cfg: &ModelConfig,
) -> Result<GradientBundle> {
    Ok(GradientBundle {
        grad_upper_w: grad_upper_w(w, adversary, static_data, cfg)?,
        grad_upper_x: grad_upper_x(w, adversary)?,
        grad_lower_x: grad_lower_x(w, adversary)?,
        hess_upper_ww: hess_upper_ww(&static_data.rows, &adversary.current, cfg.ridge)?,
        hess_lower_xx: hess_lower_xx_block(w, adversary.n_rows()),
        cross_lower_wx: cross_lower_wx(w, adversary)?,
        cross_upper_wx: cross_upper_wx(w, adversary)?,
        grad_constraints: grad_constraints_x(adversary)?,
        hess_constraints: hess_constraints_xx(adversary)?,
    })
}

/// Central finite differences.
pub mod fd {
    use nalgebra::DVector;

    /// Outcome of comparing an analytic gradient against central differences.
    #[derive(Debug, Clone)]
    pub struct FdReport {
        pub max_rel_error: f64,
        pub worst_index: usize,
        pub tol: f64,
        pub pass: bool,
    }

    /// Central-difference gradient of a scalar field.
    pub fn central_gradient<F>(f: F, point: &DVector<f64>, step: f64) -> DVector<f64>
    where
        F: Fn(&DVector<f64>) -> f64,
    {
        let n = point.len();
        let mut grad = DVector::zeros(n);
        let mut x = point.clone();
        for i in 0..n {
            let orig = x[i];
            x[i] = orig + step;
            let plus = f(&x);
            x[i] = orig - step;
            let minus = f(&x);
            x[i] = orig;
            grad[i] = (plus - minus) / (2.0 * step);
        }
        grad
    }

    /// Compares `grad(point)` against central differences of `f`, entrywise,
    /// with relative denominator `max(1, |analytic|)`.
    pub fn fd_check<F, G>(f: F, grad: G, point: &DVector<f64>, step: f64, tol: f64) -> FdReport
    where
        F: Fn(&DVector<f64>) -> f64,
        G: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let analytic = grad(point);
        let numeric = central_gradient(f, point, step);
        compare(&analytic, &numeric, tol)
    }

    /// Entrywise comparison of two gradient vectors.
    pub fn compare(analytic: &DVector<f64>, numeric: &DVector<f64>, tol: f64) -> FdReport {
        assert_eq!(analytic.len(), numeric.len());
        let mut max_rel_error = 0.0;
        let mut worst_index = 0;
        for i in 0..analytic.len() {
            let denom = analytic[i].abs().max(1.0);
            let rel = (analytic[i] - numeric[i]).abs() / denom;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst_index = i;
            }
        }
        FdReport {
            max_rel_error,
            worst_index,
            tol,
            pass: max_rel_error <= tol,
        }
    }
}

/// One named finite-difference comparison, aggregated over random trials.
#[derive(Debug, Clone)]
pub struct NamedCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Verifies every analytic derivative against central finite differences on
/// `trials` random instances and reports the worst relative error per
/// derivative. Used by the `check-derivatives` CLI subcommand and the
/// acceptance suite.
pub fn derivative_check_suite(trials: usize, seed: u64) -> Result<Vec<NamedCheck>> {
    use rand::{Rng, SeedableRng};
    const STEP: f64 = 1e-6;
    const TOL: f64 = 1e-5;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "grad_upper_w",
        "grad_upper_x",
        "grad_lower_x",
        "grad_constraints",
        "hess_upper_ww",
        "hess_constraints",
        "cross_lower_wx",
    ];
    let mut worst = [0.0f64; 7];

    for _ in 0..trials {
        let q = rng.random_range(2..=5);
        let m = rng.random_range(1..=3);
        let n = rng.random_range(2..=6);
        let s = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(0.1..1.0);

        let d = DMatrix::from_fn(n, q, |_, _| s(&mut rng));
        let gamma = DVector::from_fn(n, |_, _| s(&mut rng));
        let origin = DMatrix::from_fn(m, q, |_, _| s(&mut rng));
        let current = DMatrix::from_fn(m, q, |_, _| s(&mut rng));
        let y = DVector::from_fn(m, |_, _| s(&mut rng));
        let w = Weights(DVector::from_fn(q, |_, _| s(&mut rng)));
        let data = Dataset::new(d, gamma)?;
        let adv = AdversaryBlock::new(origin.clone(), y, 0.3)?.with_current(current.clone())?;
        let cfg = ModelConfig { delta: 0.9, ridge: Some(100.0), nu: 0.3 };

        let track = |worst: &mut f64, report: fd::FdReport| {
            *worst = worst.max(report.max_rel_error);
        };

        // Upper objective in w.
        let f_w = |v: &DVector<f64>| {
            crate::model::upper_objective(&Weights(v.clone()), &adv, &data, &cfg).unwrap()
        };
        track(
            &mut worst[0],
            fd::fd_check(f_w, |v| grad_upper_w(&Weights(v.clone()), &adv, &data, &cfg).unwrap(), &w.0, STEP, TOL),
        );

        // Both objectives in vec(X).
        let adv_at = |v: &DVector<f64>| {
            adv.clone().with_current(unflatten_rows(v, m, q)).unwrap()
        };
        let xflat = flatten_rows(&current);
        track(
            &mut worst[1],
            fd::fd_check(
                |v| crate::model::upper_objective(&w, &adv_at(v), &data, &cfg).unwrap(),
                |v| flatten_rows(&grad_upper_x(&w, &adv_at(v)).unwrap()),
                &xflat,
                STEP,
                TOL,
            ),
        );
        track(
            &mut worst[2],
            fd::fd_check(
                |v| crate::model::lower_objective(&w, &adv_at(v)).unwrap(),
                |v| flatten_rows(&grad_lower_x(&w, &adv_at(v)).unwrap()),
                &xflat,
                STEP,
                TOL,
            ),
        );

        // Constraint gradient and Hessian, row by row.
        for i in 0..m {
            let x0 = origin.row(i).transpose();
            let xi = current.row(i).transpose();
            track(
                &mut worst[3],
                fd::fd_check(
                    |v| cfg.delta - crate::model::cosine_similarity(v, &x0).unwrap(),
                    |v| grad_constraint_row(v, &x0).unwrap(),
                    &xi,
                    STEP,
                    TOL,
                ),
            );
            // Hessian columns against FD of the analytic gradient.
            let h = hess_constraint_block(&xi, &x0)?;
            for c in 0..q {
                let col = h.column(c).clone_owned();
                let numeric = fd::central_gradient(
                    |v| grad_constraint_row(v, &x0).unwrap()[c],
                    &xi,
                    STEP,
                );
                track(&mut worst[5], fd::compare(&col, &numeric, TOL));
            }
        }

        // Weight Hessian columns against FD of the analytic gradient.
        let h = hess_upper_ww(&data.rows, &current, cfg.ridge)?;
        for c in 0..q {
            let col = h.column(c).clone_owned();
            let numeric = fd::central_gradient(
                |v| grad_upper_w(&Weights(v.clone()), &adv, &data, &cfg).unwrap()[c],
                &w.0,
                STEP,
            );
            track(&mut worst[4], fd::compare(&col, &numeric, TOL));
        }

        // Mixed derivative: rows of cross_lower_wx against FD in X of the
        // lower gradient in w.
        let cross = cross_lower_wx(&w, &adv)?;
        for k in 0..q {
            let row = cross.row(k).transpose();
            let numeric = fd::central_gradient(
                |v| {
                    let advx = adv_at(v);
                    let res = &advx.current * &w.0 - &advx.target_labels;
                    (2.0 / m as f64) * advx.current.column(k).dot(&res)
                },
                &xflat,
                STEP,
            );
            track(&mut worst[6], fd::compare(&row, &numeric, TOL));
        }
    }

    Ok(names
        .iter()
        .zip(worst.iter())
        .map(|(&name, &max_rel_error)| NamedCheck {
            name,
            max_rel_error,
            tol: TOL,
            pass: max_rel_error <= TOL,
        })
        .collect())
}

/// Flattens an `m x q` matrix row-major into a vector.
pub fn flatten_rows(m: &DMatrix<f64>) -> DVector<f64> {
    let (rows, cols) = m.shape();
    DVector::from_fn(rows * cols, |k, _| m[(k / cols, k % cols)])
}

/// Inverse of [`flatten_rows`].
pub fn unflatten_rows(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| v[i * cols + j])
}

#[cfg(test)]
mod tests {
    use super::fd::{central_gradient, compare, fd_check};
    use super::*;
    use crate::model::{constraint_values, lower_objective, upper_objective};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-6;

    struct Instance {
        w: Weights,
        adv: AdversaryBlock,
        data: Dataset,
        cfg: ModelConfig,
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize, q: usize) -> Instance {
        let s = |rng: &mut ChaCha8Rng| rng.random_range(0.1..1.0);
        let d = DMatrix::from_fn(n, q, |_, _| s(rng));
        let gamma = DVector::from_fn(n, |_, _| s(rng));
        let origin = DMatrix::from_fn(m, q, |_, _| s(rng));
        let current = DMatrix::from_fn(m, q, |_, _| s(rng));
        let y = DVector::from_fn(m, |_, _| s(rng));
        let w = Weights(DVector::from_fn(q, |_, _| s(rng)));
        let adv = AdversaryBlock::new(origin, y, 0.25)
            .unwrap()
            .with_current(current)
            .unwrap();
        let data = Dataset::new(d, gamma).unwrap();
        let cfg = ModelConfig { delta: 0.9, ridge: Some(100.0), nu: 0.25 };
        Instance { w, adv, data, cfg }
    }

    #[test]
    fn grad_upper_w_zero_cases() {
        // All labels zero and w zero: residuals are zero, ridge term is zero.
        let d = DMatrix::from_row_slice(2, 2, &[0.3, 0.4, 0.2, 0.9]);
        let data = Dataset::new(d.clone(), DVector::zeros(2)).unwrap();
        let adv = AdversaryBlock::new(d, DVector::zeros(2), 0.0).unwrap();
        let w = Weights(DVector::zeros(2));
        let cfg = ModelConfig::default();
        let g = grad_upper_w(&w, &adv, &data, &cfg).unwrap();
        assert_relative_eq!(g.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn grad_upper_w_perfect_fit_no_ridge() {
        let rows = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let w = Weights(DVector::from_row_slice(&[0.4, 0.7]));
        let labels = &rows * &w.0;
        let data = Dataset::new(rows.clone(), labels.clone()).unwrap();
        let adv = AdversaryBlock::new(rows, labels, 0.0).unwrap();
        let cfg = ModelConfig { ridge: None, ..Default::default() };
        let g = grad_upper_w(&w, &adv, &data, &cfg).unwrap();
        assert_relative_eq!(g.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_upper_w_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = random_instance(&mut rng, 3, 2, 3);
        let report = fd_check(
            |wv| {
                upper_objective(&Weights(wv.clone()), &inst.adv, &inst.data, &inst.cfg).unwrap()
            },
            |wv| grad_upper_w(&Weights(wv.clone()), &inst.adv, &inst.data, &inst.cfg).unwrap(),
            &inst.w.0,
            STEP,
            1e-6,
        );
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn hess_upper_ww_pure_ridge() {
        let zeros = DMatrix::zeros(2, 3);
        let h = hess_upper_ww(&zeros, &zeros.clone(), Some(50.0)).unwrap();
        for k in 0..3 {
            for c in 0..3 {
                let expected = if k == c { 2.0 / 50.0 } else { 0.0 };
                assert_relative_eq!(h[(k, c)], expected, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn hess_upper_ww_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 4, 2, 3);
            let h = hess_upper_ww(&inst.data.rows, &inst.adv.current, inst.cfg.ridge).unwrap();
            assert_relative_eq!((&h - h.transpose()).norm(), 0.0, epsilon = 1e-12);
            let eig = h.symmetric_eigenvalues();
            for i in 0..eig.len() {
                assert!(eig[i] >= -1e-10, "negative eigenvalue {}", eig[i]);
            }
        }
    }

    #[test]
    fn hess_upper_ww_matches_fd_of_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(&mut rng, 3, 2, 3);
        let h = hess_upper_ww(&inst.data.rows, &inst.adv.current, inst.cfg.ridge).unwrap();
        // Differentiate each gradient component.
        for k in 0..3 {
            let numeric = central_gradient(
                |wv| grad_upper_w(&Weights(wv.clone()), &inst.adv, &inst.data, &inst.cfg).unwrap()[k],
                &inst.w.0,
                STEP,
            );
            let report = compare(&h.row(k).transpose(), &numeric, 1e-5);
            assert!(report.pass, "row {k}: max rel error {}", report.max_rel_error);
        }
    }

    fn x_objective_closure<'a>(
        inst: &'a Instance,
        upper: bool,
    ) -> impl Fn(&DVector<f64>) -> f64 + 'a {
        move |flat: &DVector<f64>| {
            let x = unflatten_rows(flat, inst.adv.n_rows(), inst.adv.n_features());
            let adv = inst.adv.clone().with_current(x).unwrap();
            if upper {
                upper_objective(&inst.w, &adv, &inst.data, &inst.cfg).unwrap()
            } else {
                lower_objective(&inst.w, &adv).unwrap()
            }
        }
    }

    #[test]
    fn grad_upper_x_zero_cases() {
        let x = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.25, 0.75]);
        let w = Weights(DVector::from_row_slice(&[1.0, 1.0]));
        let labels = &x * &w.0;
        let adv = AdversaryBlock::new(x.clone(), labels, 0.0).unwrap();
        assert_relative_eq!(grad_upper_x(&w, &adv).unwrap().norm(), 0.0, epsilon = 1e-14);

        let adv2 = AdversaryBlock::new(x, DVector::from_row_slice(&[0.1, 0.9]), 0.0).unwrap();
        let zero_w = Weights(DVector::zeros(2));
        assert_relative_eq!(grad_upper_x(&zero_w, &adv2).unwrap().norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn grad_upper_x_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inst = random_instance(&mut rng, 3, 2, 3);
        let f = x_objective_closure(&inst, true);
        let report = fd_check(
            &f,
            |flat| {
                let x = unflatten_rows(flat, 2, 3);
                let adv = inst.adv.clone().with_current(x).unwrap();
                flatten_rows(&grad_upper_x(&inst.w, &adv).unwrap())
            },
            &flatten_rows(&inst.adv.current),
            STEP,
            1e-6,
        );
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn grad_lower_x_scalar_case() {
        // m = 1, q = 1, w = 2, X = 3, Z = 1: (2/1) * 2 * (6 - 1) = 20.
        let adv = AdversaryBlock::new(
            DMatrix::from_row_slice(1, 1, &[3.0]),
            DVector::from_row_slice(&[1.0]),
            0.0,
        )
        .unwrap();
        let w = Weights(DVector::from_row_slice(&[2.0]));
        let g = grad_lower_x(&w, &adv).unwrap();
        assert_relative_eq!(g[(0, 0)], 20.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_lower_x_zero_when_targets_met() {
        let x = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.25, 0.75]);
        let w = Weights(DVector::from_row_slice(&[1.0, 1.0]));
        let targets = &x * &w.0;
        let adv = AdversaryBlock::new(x, targets, 0.0).unwrap();
        assert_relative_eq!(grad_lower_x(&w, &adv).unwrap().norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn grad_lower_x_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = random_instance(&mut rng, 3, 2, 3);
        let f = x_objective_closure(&inst, false);
        let report = fd_check(
            &f,
            |flat| {
                let x = unflatten_rows(flat, 2, 3);
                let adv = inst.adv.clone().with_current(x).unwrap();
                flatten_rows(&grad_lower_x(&inst.w, &adv).unwrap())
            },
            &flatten_rows(&inst.adv.current),
            STEP,
            1e-6,
        );
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn hess_lower_block_structure() {
        let w = Weights(DVector::from_row_slice(&[0.3, -0.7]));
        let block = hess_lower_xx_block(&w, 2);
        assert_relative_eq!((&block - block.transpose()).norm(), 0.0, epsilon = 1e-14);
        // Rank at most one.
        let svd = block.clone().svd(false, false);
        assert!(svd.singular_values[1].abs() < 1e-12);
        // PSD.
        let eig = block.symmetric_eigenvalues();
        for i in 0..2 {
            assert!(eig[i] >= -1e-12);
        }
        let zero = hess_lower_xx_block(&Weights(DVector::zeros(2)), 2);
        assert_relative_eq!(zero.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn hess_lower_matches_fd_of_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inst = random_instance(&mut rng, 3, 2, 3);
        let (m, q) = inst.adv.current.shape();
        let block = hess_lower_xx_block(&inst.w, m);
        // Differentiate each entry of grad_lower_x w.r.t. each data entry.
        for i in 0..m {
            for j in 0..q {
                let numeric = central_gradient(
                    |flat| {
                        let x = unflatten_rows(flat, m, q);
                        let adv = inst.adv.clone().with_current(x).unwrap();
                        grad_lower_x(&inst.w, &adv).unwrap()[(i, j)]
                    },
                    &flatten_rows(&inst.adv.current),
                    STEP,
                );
                let mut analytic = DVector::zeros(m * q);
                for c in 0..q {
                    analytic[i * q + c] = block[(j, c)];
                }
                let report = compare(&analytic, &numeric, 1e-5);
                assert!(report.pass, "entry ({i},{j}): {}", report.max_rel_error);
            }
        }
    }

    #[test]
    fn cross_lower_scalar_oracle() {
        // d^2/dw dx of (wx - z)^2 is 2(2wx - z); at w=1, x=2, z=1 this is 6.
        let adv = AdversaryBlock::new(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DVector::from_row_slice(&[1.0]),
            0.0,
        )
        .unwrap();
        let w = Weights(DVector::from_row_slice(&[1.0]));
        let c = cross_lower_wx(&w, &adv).unwrap();
        assert_relative_eq!(c[(0, 0)], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_lower_zero_case() {
        // w = 0 and targets 0 make both terms vanish.
        let adv = AdversaryBlock::new(
            DMatrix::from_row_slice(1, 2, &[0.5, 0.5]),
            DVector::zeros(1),
            0.0,
        )
        .unwrap();
        let w = Weights(DVector::zeros(2));
        let c = cross_lower_wx(&w, &adv).unwrap();
        assert_relative_eq!(c.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn cross_lower_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inst = random_instance(&mut rng, 3, 2, 3);
        let (m, q) = inst.adv.current.shape();
        let cross = cross_lower_wx(&inst.w, &inst.adv).unwrap();
        // Row k of the cross matrix is the X-gradient of dF/dw_k.
        for k in 0..q {
            let numeric = central_gradient(
                |flat| {
                    let x = unflatten_rows(flat, m, q);
                    let adv = inst.adv.clone().with_current(x).unwrap();
                    // Gradient of the lower objective w.r.t. w_k.
                    let res = &adv.current * &inst.w.0 - &adv.target_labels;
                    (adv.current.column(k).dot(&res)) * 2.0 / m as f64
                },
                &flatten_rows(&inst.adv.current),
                STEP,
            );
            let report = compare(&cross.row(k).transpose(), &numeric, 1e-5);
            assert!(report.pass, "weight {k}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn constraint_gradient_zero_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DVector::from_fn(3, |_, _| rng.random_range(0.1..1.0));
        let g = grad_constraint_row(&x, &x).unwrap();
        assert_relative_eq!(g.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn constraint_gradient_orthogonal_to_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(0.1..1.0));
            let x0 = DVector::from_fn(4, |_, _| rng.random_range(0.1..1.0));
            let g = grad_constraint_row(&x, &x0).unwrap();
            assert!(g.dot(&x).abs() < 1e-10, "not orthogonal: {}", g.dot(&x));
        }
    }

    #[test]
    fn constraint_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inst = random_instance(&mut rng, 2, 2, 3);
        let (m, q) = inst.adv.current.shape();
        let delta = 0.9;
        for i in 0..m {
            let numeric = central_gradient(
                |flat| {
                    let x = unflatten_rows(flat, m, q);
                    let adv = inst.adv.clone().with_current(x).unwrap();
                    constraint_values(&adv, delta).unwrap()[i]
                },
                &flatten_rows(&inst.adv.current),
                STEP,
            );
            let blocks = grad_constraints_x(&inst.adv).unwrap();
            let mut analytic = DVector::zeros(m * q);
            for j in 0..q {
                analytic[i * q + j] = blocks[i][j];
            }
            let report = compare(&analytic, &numeric, 1e-6);
            assert!(report.pass, "constraint {i}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn constraint_hessian_symmetric_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inst = random_instance(&mut rng, 2, 2, 3);
        let (m, q) = inst.adv.current.shape();
        let blocks = hess_constraints_xx(&inst.adv).unwrap();
        for (i, block) in blocks.iter().enumerate() {
            assert_relative_eq!((block - block.transpose()).norm(), 0.0, epsilon = 1e-14);
            for j in 0..q {
                let numeric = central_gradient(
                    |flat| {
                        let x = unflatten_rows(flat, m, q);
                        let xi = x.row(i).transpose();
                        let oi = inst.adv.origin.row(i).transpose();
                        grad_constraint_row(&xi, &oi).unwrap()[j]
                    },
                    &flatten_rows(&inst.adv.current),
                    STEP,
                );
                let mut analytic = DVector::zeros(m * q);
                for c in 0..q {
                    analytic[i * q + c] = block[(j, c)];
                }
                let report = compare(&analytic, &numeric, 1e-4);
                assert!(report.pass, "block {i} row {j}: {}", report.max_rel_error);
            }
        }
    }

    #[test]
    fn fd_check_passes_quadratic() {
        let point = DVector::from_row_slice(&[0.3, -0.8, 1.2]);
        let report = fd_check(
            |x| x.norm_squared(),
            |x| 2.0 * x,
            &point,
            1e-6,
            1e-8,
        );
        assert!(report.pass, "{}", report.max_rel_error);
    }

    #[test]
    fn fd_check_fails_wrong_gradient() {
        let point = DVector::from_row_slice(&[0.3, -0.8, 1.2]);
        let report = fd_check(
            |x| x.norm_squared(),
            |x| 2.2 * x,
            &point,
            1e-6,
            1e-8,
        );
        assert!(!report.pass);
    }
}
