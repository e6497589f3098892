//! Damped Gauss-Newton (Levenberg-Marquardt) iteration on the stacked
//! stationarity residual, globalized by an Armijo line search on the merit
//! `Psi = 0.5 ||phi||^2` with a gradient-descent fallback, plus a stall rule
//! that salvages the best iterate when the residual stops contracting. The
//! system is overdetermined, so a stall at a nonzero least-squares residual is
//! an expected outcome, not a failure.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::fit_linreg;
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::stationarity::{assemble_jacobian, assemble_residual, BilevelProblem, BlockVariable};

/// Tunables of the solve loop. Defaults are conventional for
/// Fischer-Burmeister merit systems and exposed so sweeps can override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Residual-norm stopping tolerance.
    pub eps: f64,
    /// Full-step acceptance factor in (0,1).
    pub kappa: f64,
    /// Armijo slope factor in (0,1).
    pub sigma: f64,
    /// Backtracking ratio in (0,1).
    pub step_beta: f64,
    /// Damping schedule: `nu_k = min(gamma1, gamma2 * ||phi||)`.
    pub gamma1: f64,
    pub gamma2: f64,
    /// Angle test threshold for falling back to the merit gradient.
    pub angle_rho: f64,
    /// Minimum useful step norm before falling back to the merit gradient.
    pub min_step: f64,
    /// Stall detection: contraction ratio threshold in (0,1).
    pub eta: f64,
    /// Stall detection: iterations before the ratio test activates.
    pub stall_window: usize,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eps: 1e-6,
            kappa: 0.8,
            sigma: 1e-4,
            step_beta: 0.5,
            gamma1: 1.0,
            gamma2: 1.0,
            angle_rho: 1e-8,
            min_step: 1e-12,
            eta: 0.995,
            stall_window: 50,
            max_iter: 1000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.eps <= 0.0
            || !in_unit(self.kappa)
            || !in_unit(self.sigma)
            || !in_unit(self.step_beta)
            || self.gamma1 <= 0.0
            || self.gamma2 <= 0.0
            || self.angle_rho <= 0.0
            || self.min_step <= 0.0
            || !in_unit(self.eta)
        {
            return Err(Error::InvalidConfig("solver parameter out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    /// Levenberg-Marquardt step accepted by the full-step test.
    Full,
    /// Levenberg-Marquardt direction with Armijo backtracking.
    LineSearch,
    /// Fallback to the negative merit gradient with backtracking.
    Gradient,
}

/// One completed iteration of the solve loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Merit before the step.
    pub merit: f64,
    /// Residual norm before the step.
    pub residual_norm: f64,
    pub step: StepKind,
    pub damping: f64,
    pub step_length: f64,
}

/// Outcome of a solve over a generic residual system.
#[derive(Debug, Clone)]
pub struct SystemOutcome {
    pub solution: DVector<f64>,
    pub residual_norm: f64,
    pub status: SolveStatus,
    pub trace: Vec<IterationRecord>,
}

/// Outcome of a bilevel solve; the solution is unpacked into block form.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub point: BlockVariable,
    pub residual_norm: f64,
    pub status: SolveStatus,
    pub trace: Vec<IterationRecord>,
}

impl SolveOutcome {
    /// Writes the iteration trace as line-delimited JSON records.
    pub fn write_trace<W: Write>(&self, mut out: W) -> Result<()> {
        for record in &self.trace {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Merit function `0.5 ||phi||^2`.
pub fn merit(phi: &DVector<f64>) -> f64 {
    0.5 * phi.norm_squared()
}

/// Solves the damped normal equations `(J^T J + nu I) d = -J^T phi`.
pub fn lm_step(phi: &DVector<f64>, jacobian: &DMatrix<f64>, damping: f64) -> Result<DVector<f64>> {
    debug_assert!(damping > 0.0);
    let jt = jacobian.transpose();
    let mut lhs = &jt * jacobian;
    for i in 0..lhs.nrows() {
        lhs[(i, i)] += damping;
    }
    let rhs = -(&jt * phi);
    if let Some(chol) = lhs.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    lhs.clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| {
            let diag_max = (0..lhs.nrows()).map(|i| lhs[(i, i)].abs()).fold(0.0, f64::max);
            Error::LinearSolve(format!(
                "damped normal equations singular (damping {damping:.3e}, max diagonal {diag_max:.3e})"
            ))
        })
}

/// A residual system the generic solve loop can iterate on.
pub trait ResidualProblem {
    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>>;
}

struct BilevelResidual<'a>(&'a BilevelProblem);

impl ResidualProblem for BilevelResidual<'_> {
    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let point = BlockVariable::from_flat(u, self.0.layout())?;
        assemble_residual(self.0, &point)
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let point = BlockVariable::from_flat(u, self.0.layout())?;
        assemble_jacobian(self.0, &point)
    }
}

const MAX_BACKTRACKS: usize = 100;

/// Generic solve loop. Deterministic: identical inputs produce identical
/// traces.
pub fn solve_system<P: ResidualProblem>(
    problem: &P,
    start: DVector<f64>,
    cfg: &SolverConfig,
) -> Result<SystemOutcome> {
    cfg.validate()?;
    let mut u = start;
    let mut phi = problem.residual(&u)?;
    if !phi.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("residual at start point"));
    }

    let mut best_u = u.clone();
    let mut best_merit = merit(&phi);
    let mut best_norm = phi.norm();
    let mut prev_norm = f64::INFINITY;
    let mut trace = Vec::new();

    let finish = |status: SolveStatus,
                  u: DVector<f64>,
                  norm: f64,
                  trace: Vec<IterationRecord>| SystemOutcome {
        solution: u,
        residual_norm: norm,
        status,
        trace,
    };

    for k in 0..=cfg.max_iter {
        let phi_norm = phi.norm();
        let psi = merit(&phi);
        if psi < best_merit {
            best_merit = psi;
            best_norm = phi_norm;
            best_u = u.clone();
        }

        if phi_norm <= cfg.eps || !phi_norm.is_finite() {
            let status = if phi_norm <= cfg.eps { SolveStatus::Converged } else { SolveStatus::Stalled };
            let (u, norm) = if status == SolveStatus::Converged { (u, phi_norm) } else { (best_u, best_norm) };
            return Ok(finish(status, u, norm, trace));
        }
        if k == cfg.max_iter {
            return Ok(finish(SolveStatus::MaxIterations, best_u, best_norm, trace));
        }
        if k > cfg.stall_window && phi_norm / prev_norm >= cfg.eta {
            return Ok(finish(SolveStatus::Stalled, best_u, best_norm, trace));
        }

        let jac = problem.jacobian(&u)?;
        let damping = cfg.gamma1.min(cfg.gamma2 * phi_norm);
        let mut direction = lm_step(&phi, &jac, damping)?;
        let grad_merit = jac.transpose() * &phi;

        let full = &u + &direction;
        let full_phi = problem.residual(&full)?;
        let (next_u, next_phi, kind, step_length) = if full_phi.norm_squared() * 0.5 <= cfg.kappa * psi
        {
            (full, full_phi, StepKind::Full, 1.0)
        } else {
            let grad_norm = grad_merit.norm();
            if grad_norm < 1e-14 {
                // Stationary point of the merit with a nonzero residual.
                return Ok(finish(SolveStatus::Stalled, best_u, best_norm, trace));
            }
            let mut kind = StepKind::LineSearch;
            let slope = grad_merit.dot(&direction);
            if slope > -cfg.angle_rho * grad_norm * direction.norm()
                || direction.norm() < cfg.min_step
            {
                direction = -grad_merit.clone();
                kind = StepKind::Gradient;
            }
            let slope = grad_merit.dot(&direction);
            let mut alpha = cfg.step_beta;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let trial = &u + alpha * &direction;
                let trial_phi = problem.residual(&trial)?;
                if 0.5 * trial_phi.norm_squared() <= psi + alpha * cfg.sigma * slope {
                    accepted = Some((trial, trial_phi));
                    break;
                }
                alpha *= cfg.step_beta;
            }
            match accepted {
                Some((trial, trial_phi)) => (trial, trial_phi, kind, alpha),
                // No acceptable step: the line search bottomed out.
                None => return Ok(finish(SolveStatus::Stalled, best_u, best_norm, trace)),
            }
        };

        trace.push(IterationRecord {
            iteration: k,
            merit: psi,
            residual_norm: phi_norm,
            step: kind,
            damping,
            step_length,
        });
        prev_norm = phi_norm;
        u = next_u;
        phi = next_phi;
    }
    unreachable!("loop exits via return");
}

/// Default start point: weights from the ridge baseline fit over all training
/// rows, the adversary at its origin, `lambda = 1` and small positive
/// inequality multipliers.
pub fn default_start(problem: &BilevelProblem) -> Result<BlockVariable> {
    let n = problem.n_static();
    let m = problem.n_adversary();
    let q = problem.n_features();

    let mut rows = DMatrix::zeros(n + m, q);
    rows.rows_mut(0, n).copy_from(&problem.static_data.rows);
    rows.rows_mut(n, m).copy_from(&problem.adversary.origin);
    let mut labels = DVector::zeros(n + m);
    labels.rows_mut(0, n).copy_from(&problem.static_data.labels);
    labels.rows_mut(n, m).copy_from(&problem.adversary.true_labels);
    let combined = Dataset::new(rows, labels)?;
    let w = fit_linreg(&combined, problem.config.ridge.or(Some(100.0)))?;

    let multipliers = DVector::from_element(m, 1e-2);
    BlockVariable::from_parts(&w.0, &problem.adversary.origin, &multipliers, &multipliers, 1.0)
}

/// Solves the bilevel stationarity system from `start`.
pub fn solve(
    problem: &BilevelProblem,
    start: &BlockVariable,
    cfg: &SolverConfig,
) -> Result<SolveOutcome> {
    if start.layout() != problem.layout() {
        return Err(Error::dims(
            "start point size",
            problem.layout().n_unknowns(),
            start.layout().n_unknowns(),
        ));
    }
    let outcome = solve_system(&BilevelResidual(problem), start.to_flat(), cfg)?;
    Ok(SolveOutcome {
        point: BlockVariable::from_flat(&outcome.solution, problem.layout())?,
        residual_norm: outcome.residual_norm,
        status: outcome.status,
        trace: outcome.trace,
    })
}
