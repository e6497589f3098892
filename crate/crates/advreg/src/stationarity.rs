//! The stationarity equation system for the pessimistic bilevel program.
//!
//! The unknowns are packed as `u = [w; vec(X); beta; beta_hat; lambda]` with
//! `vec(X)` row-major. The residual stacks, in this fixed order:
//!
//! 1. gradient of the upper objective in `w`                       (`q` rows)
//! 2. gradient of the upper Lagrangian `F - lambda f - beta^T g`
//!    in the data                                                  (`m*q` rows)
//! 3. gradient of the lower Lagrangian `f + beta_hat^T g`
//!    in the data                                                  (`m*q` rows)
//! 4. Fischer-Burmeister rows pairing `beta_i` and `beta_hat_i`
//!    with `-g_i(X)`                                               (`2m` rows)
//! 5. one Fischer-Burmeister row pairing `lambda` with `0`,
//!    keeping `lambda >= 0` inside the equation system             (1 row)
//!
//! The system has `m*q` more rows than unknowns; the Levenberg-Marquardt
//! solver minimizes the squared residual norm over it.

use nalgebra::{DMatrix, DVector};

use crate::calculus::{
    cross_lower_wx, cross_upper_wx, flatten_rows, grad_constraints_x, grad_lower_x, grad_upper_w,
    grad_upper_x, hess_constraints_xx, hess_upper_ww, unflatten_rows,
};
use crate::error::{Error, Result};
use crate::model::{
    constraint_values, lower_objective, upper_objective, AdversaryBlock, Dataset, ModelConfig,
    Weights,
};

/// Problem data for one training instance of the bilevel game.
#[derive(Debug, Clone)]
pub struct BilevelProblem {
    pub static_data: Dataset,
    /// Origin, labels and targets of the adversary's block. Its `current`
    /// field is only a default; the solver carries the live `X` inside the
    /// block variable.
    pub adversary: AdversaryBlock,
    pub config: ModelConfig,
}

impl BilevelProblem {
    pub fn new(static_data: Dataset, adversary: AdversaryBlock, config: ModelConfig) -> Result<Self> {
        if static_data.n_features() != adversary.n_features() {
            return Err(Error::dims(
                "bilevel problem features",
                static_data.n_features(),
                adversary.n_features(),
            ));
        }
        config.validate()?;
        Ok(BilevelProblem { static_data, adversary, config })
    }

    pub fn n_features(&self) -> usize {
        self.static_data.n_features()
    }

    pub fn n_adversary(&self) -> usize {
        self.adversary.n_rows()
    }

    pub fn n_static(&self) -> usize {
        self.static_data.n_rows()
    }

    pub fn layout(&self) -> Layout {
        Layout { q: self.n_features(), m: self.n_adversary() }
    }
}

/// Row and column index map of the assembled system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub q: usize,
    pub m: usize,
}

impl Layout {
    pub fn n_unknowns(&self) -> usize {
        self.q + self.m * self.q + 2 * self.m + 1
    }

    pub fn n_equations(&self) -> usize {
        self.q + 2 * self.m * self.q + 2 * self.m + 1
    }

    // Row blocks.
    pub fn rows_grad_w(&self) -> std::ops::Range<usize> {
        0..self.q
    }
    pub fn rows_lag_upper(&self) -> std::ops::Range<usize> {
        self.q..self.q + self.m * self.q
    }
    pub fn rows_lag_lower(&self) -> std::ops::Range<usize> {
        self.q + self.m * self.q..self.q + 2 * self.m * self.q
    }
    pub fn rows_fb_beta(&self) -> std::ops::Range<usize> {
        let base = self.q + 2 * self.m * self.q;
        base..base + self.m
    }
    pub fn rows_fb_beta_hat(&self) -> std::ops::Range<usize> {
        let base = self.q + 2 * self.m * self.q + self.m;
        base..base + self.m
    }
    pub fn row_fb_lambda(&self) -> usize {
        self.n_equations() - 1
    }

    // Column blocks.
    pub fn cols_w(&self) -> std::ops::Range<usize> {
        0..self.q
    }
    pub fn cols_x(&self) -> std::ops::Range<usize> {
        self.q..self.q + self.m * self.q
    }
    pub fn cols_beta(&self) -> std::ops::Range<usize> {
        let base = self.q + self.m * self.q;
        base..base + self.m
    }
    pub fn cols_beta_hat(&self) -> std::ops::Range<usize> {
        let base = self.q + self.m * self.q + self.m;
        base..base + self.m
    }
    pub fn col_lambda(&self) -> usize {
        self.n_unknowns() - 1
    }
}

/// Block variable: the primal part `z = (w, vec(X))` and the multiplier part
/// `xi = (beta, beta_hat, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVariable {
    pub z: DVector<f64>,
    pub xi: DVector<f64>,
    layout: Layout,
}

impl BlockVariable {
    pub fn from_parts(
        w: &DVector<f64>,
        x: &DMatrix<f64>,
        beta: &DVector<f64>,
        beta_hat: &DVector<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let q = w.len();
        let (m, xq) = x.shape();
        if xq != q {
            return Err(Error::dims("block variable features", q, xq));
        }
        if beta.len() != m || beta_hat.len() != m {
            return Err(Error::dims("block variable multipliers", m, beta.len()));
        }
        let mut z = DVector::zeros(q + m * q);
        z.rows_mut(0, q).copy_from(w);
        z.rows_mut(q, m * q).copy_from(&flatten_rows(x));
        let mut xi = DVector::zeros(2 * m + 1);
        xi.rows_mut(0, m).copy_from(beta);
        xi.rows_mut(m, m).copy_from(beta_hat);
        xi[2 * m] = lambda;
        Ok(BlockVariable { z, xi, layout: Layout { q, m } })
    }

    /// Rebuilds a block variable from one flat vector in system ordering.
    pub fn from_flat(u: &DVector<f64>, layout: Layout) -> Result<Self> {
        if u.len() != layout.n_unknowns() {
            return Err(Error::dims("flat block variable", layout.n_unknowns(), u.len()));
        }
        let zlen = layout.q + layout.m * layout.q;
        Ok(BlockVariable {
            z: u.rows(0, zlen).into_owned(),
            xi: u.rows(zlen, 2 * layout.m + 1).into_owned(),
            layout,
        })
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let mut u = DVector::zeros(self.z.len() + self.xi.len());
        u.rows_mut(0, self.z.len()).copy_from(&self.z);
        u.rows_mut(self.z.len(), self.xi.len()).copy_from(&self.xi);
        u
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn weights(&self) -> DVector<f64> {
        self.z.rows(0, self.layout.q).into_owned()
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        let Layout { q, m } = self.layout;
        unflatten_rows(&self.z.rows(q, m * q).into_owned(), m, q)
    }

    pub fn beta(&self) -> DVector<f64> {
        self.xi.rows(0, self.layout.m).into_owned()
    }

    pub fn beta_hat(&self) -> DVector<f64> {
        self.xi.rows(self.layout.m, self.layout.m).into_owned()
    }

    pub fn lambda(&self) -> f64 {
        self.xi[2 * self.layout.m]
    }
}

/// Fischer-Burmeister function: `sqrt(a^2 + b^2) - (a + b)`.
/// Zero exactly when `a >= 0`, `b >= 0` and `a * b = 0`.
pub fn fb(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt() - (a + b)
}

/// Generalized derivative of [`fb`]. At the kink `a = b = 0` both slots take
/// the midpoint element `sqrt(1/2) - 1`.
pub fn fb_grad(a: f64, b: f64) -> (f64, f64) {
    let r = (a * a + b * b).sqrt();
    if r == 0.0 {
        let v = 0.5f64.sqrt() - 1.0;
        (v, v)
    } else {
        (a / r - 1.0, b / r - 1.0)
    }
}

fn adversary_at(problem: &BilevelProblem, point: &BlockVariable) -> Result<AdversaryBlock> {
    problem.adversary.clone().with_current(point.x_matrix())
}

/// Upper Lagrangian `F(w, X) - lambda f(w, X) - beta^T g(X)`.
pub fn lagrangian_upper(problem: &BilevelProblem, point: &BlockVariable) -> Result<f64> {
    let w = Weights(point.weights());
    let adv = adversary_at(problem, point)?;
    let f_val = upper_objective(&w, &adv, &problem.static_data, &problem.config)?;
    let lower = lower_objective(&w, &adv)?;
    let g = constraint_values(&adv, problem.config.delta)?;
    Ok(f_val - point.lambda() * lower - point.beta().dot(&g))
}

/// Lower Lagrangian `f(w, X) + beta_hat^T g(X)`.
pub fn lagrangian_lower(problem: &BilevelProblem, point: &BlockVariable) -> Result<f64> {
    let w = Weights(point.weights());
    let adv = adversary_at(problem, point)?;
    let lower = lower_objective(&w, &adv)?;
    let g = constraint_values(&adv, problem.config.delta)?;
    Ok(lower + point.beta_hat().dot(&g))
}

/// The stacked residual and its Jacobian at one point.
#[derive(Debug, Clone)]
pub struct ResidualSystem {
    pub phi: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub layout: Layout,
}

/// Assembles the stacked residual vector.
pub fn assemble_residual(problem: &BilevelProblem, point: &BlockVariable) -> Result<DVector<f64>> {
    let layout = problem.layout();
    let Layout { q, m } = layout;
    let w = Weights(point.weights());
    let adv = adversary_at(problem, point)?;
    let beta = point.beta();
    let beta_hat = point.beta_hat();
    let lambda = point.lambda();

    let g_upper_w = grad_upper_w(&w, &adv, &problem.static_data, &problem.config)?;
    let g_upper_x = grad_upper_x(&w, &adv)?;
    let g_lower_x = grad_lower_x(&w, &adv)?;
    let g_constraints = grad_constraints_x(&adv)?;
    let g = constraint_values(&adv, problem.config.delta)?;

    let mut phi = DVector::zeros(layout.n_equations());
    phi.rows_mut(0, q).copy_from(&g_upper_w);
    for i in 0..m {
        for j in 0..q {
            let upper = g_upper_x[(i, j)] - lambda * g_lower_x[(i, j)] - beta[i] * g_constraints[i][j];
            let lower = g_lower_x[(i, j)] + beta_hat[i] * g_constraints[i][j];
            phi[layout.rows_lag_upper().start + i * q + j] = upper;
            phi[layout.rows_lag_lower().start + i * q + j] = lower;
        }
    }
    for i in 0..m {
        phi[layout.rows_fb_beta().start + i] = fb(beta[i], -g[i]);
        phi[layout.rows_fb_beta_hat().start + i] = fb(beta_hat[i], -g[i]);
    }
    phi[layout.row_fb_lambda()] = fb(lambda, 0.0);
    Ok(phi)
}

/// Assembles the exact Jacobian of [`assemble_residual`], using the midpoint
/// generalized derivative on Fischer-Burmeister kinks.
pub fn assemble_jacobian(problem: &BilevelProblem, point: &BlockVariable) -> Result<DMatrix<f64>> {
    let layout = problem.layout();
    let Layout { q, m } = layout;
    let w = Weights(point.weights());
    let adv = adversary_at(problem, point)?;
    let beta = point.beta();
    let beta_hat = point.beta_hat();
    let lambda = point.lambda();
    let mf = m as f64;

    let h_ww = hess_upper_ww(&problem.static_data.rows, &adv.current, problem.config.ridge)?;
    let cross_upper = cross_upper_wx(&w, &adv)?;
    let cross_lower = cross_lower_wx(&w, &adv)?;
    let g_lower_x = grad_lower_x(&w, &adv)?;
    let g_constraints = grad_constraints_x(&adv)?;
    let h_constraints = hess_constraints_xx(&adv)?;
    let g = constraint_values(&adv, problem.config.delta)?;

    let mut jac = DMatrix::zeros(layout.n_equations(), layout.n_unknowns());
    let x_col = layout.cols_x().start;
    let beta_col = layout.cols_beta().start;
    let beta_hat_col = layout.cols_beta_hat().start;
    let lambda_col = layout.col_lambda();

    // Rows: gradient of the upper objective in w.
    for k in 0..q {
        for c in 0..q {
            jac[(k, c)] = h_ww[(k, c)];
        }
        for col in 0..m * q {
            jac[(k, x_col + col)] = cross_upper[(k, col)];
        }
    }

    // Rows: data gradients of the two Lagrangians.
    let upper_base = layout.rows_lag_upper().start;
    let lower_base = layout.rows_lag_lower().start;
    for i in 0..m {
        for j in 0..q {
            let ru = upper_base + i * q + j;
            let rl = lower_base + i * q + j;
            // w columns (cross derivatives, transposed blocks).
            for k in 0..q {
                jac[(ru, k)] = cross_upper[(k, i * q + j)] - lambda * cross_lower[(k, i * q + j)];
                jac[(rl, k)] = cross_lower[(k, i * q + j)];
            }
            // X columns: only instance i contributes.
            for c in 0..q {
                let data_hess = 2.0 / mf * w.0[j] * w.0[c];
                jac[(ru, x_col + i * q + c)] =
                    (1.0 - lambda) * data_hess - beta[i] * h_constraints[i][(j, c)];
                jac[(rl, x_col + i * q + c)] = data_hess + beta_hat[i] * h_constraints[i][(j, c)];
            }
            // Multiplier columns.
            jac[(ru, beta_col + i)] = -g_constraints[i][j];
            jac[(ru, lambda_col)] = -g_lower_x[(i, j)];
            jac[(rl, beta_hat_col + i)] = g_constraints[i][j];
        }
    }

    // Rows: Fischer-Burmeister pairs (beta_i, -g_i) and (beta_hat_i, -g_i).
    for i in 0..m {
        let (da, db) = fb_grad(beta[i], -g[i]);
        let rb = layout.rows_fb_beta().start + i;
        jac[(rb, beta_col + i)] = da;
        for j in 0..q {
            jac[(rb, x_col + i * q + j)] = -db * g_constraints[i][j];
        }
        let (da_hat, db_hat) = fb_grad(beta_hat[i], -g[i]);
        let rbh = layout.rows_fb_beta_hat().start + i;
        jac[(rbh, beta_hat_col + i)] = da_hat;
        for j in 0..q {
            jac[(rbh, x_col + i * q + j)] = -db_hat * g_constraints[i][j];
        }
    }

    // Row: lambda paired with the identically zero constraint slot.
    let (da, _) = fb_grad(lambda, 0.0);
    jac[(layout.row_fb_lambda(), lambda_col)] = da;

    Ok(jac)
}

/// Residual and Jacobian in one call.
pub fn assemble(problem: &BilevelProblem, point: &BlockVariable) -> Result<ResidualSystem> {
    Ok(ResidualSystem {
        phi: assemble_residual(problem, point)?,
        jacobian: assemble_jacobian(problem, point)?,
        layout: problem.layout(),
    })
}

/// Unpacked first-order condition residuals at a point, for verifying that a
/// solver output really is stationary.
#[derive(Debug, Clone)]
pub struct KktReport {
    /// Infinity norm over the three stationarity row blocks.
    pub stationarity_inf: f64,
    /// Largest constraint value `g_i(X)`; feasibility needs `<= 0`.
    pub max_constraint: f64,
    /// Smallest multiplier among `beta`, `beta_hat`, `lambda`.
    pub min_multiplier: f64,
    /// Largest complementarity product `|beta_i g_i|` or `|beta_hat_i g_i|`.
    pub max_complementarity: f64,
}

pub fn kkt_report(problem: &BilevelProblem, point: &BlockVariable) -> Result<KktReport> {
    let layout = problem.layout();
    let phi = assemble_residual(problem, point)?;
    let adv = adversary_at(problem, point)?;
    let g = constraint_values(&adv, problem.config.delta)?;
    let beta = point.beta();
    let beta_hat = point.beta_hat();

    let stationarity_rows = layout.q + 2 * layout.m * layout.q;
    let stationarity_inf = phi.rows(0, stationarity_rows).amax();
    let max_constraint = g.max();
    let min_multiplier = beta.min().min(beta_hat.min()).min(point.lambda());
    let mut max_complementarity: f64 = 0.0;
    for i in 0..layout.m {
        max_complementarity = max_complementarity
            .max((beta[i] * g[i]).abs())
            .max((beta_hat[i] * g[i]).abs());
    }
    Ok(KktReport { stationarity_inf, max_constraint, min_multiplier, max_complementarity })
}

impl KktReport {
    /// Checks the report against the standard tolerances used in tests.
    pub fn satisfied(&self, stationarity_tol: f64, feasibility_tol: f64) -> bool {
        self.stationarity_inf <= stationarity_tol
            && self.max_constraint <= feasibility_tol
            && self.min_multiplier >= -1e-8
            && self.max_complementarity <= 1e-6
    }
}
