//! Test-time attack generation: each selected test row is moved to minimize
//! the squared distance of its prediction from a target label, subject to a
//! cosine-similarity floor against the original row.
//!
//! The feasible set is a nonconvex cone, so the per-instance solver runs an
//! augmented-Lagrangian outer loop with gradient-descent inner steps from
//! five deterministic starts, restores exact feasibility by rotating back
//! toward the origin, and keeps the best feasible candidate. The original row
//! is always a candidate, so the attack never increases the adversary's loss.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::grad_constraint_row;
use crate::error::{Error, Result};
use crate::model::{adversary_loss, cosine_similarity, Dataset, Weights};

/// How a test set is attacked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    /// Fraction of test rows to attack.
    pub attacked_fraction: f64,
    /// Target offset added to the true label; `None` uses twice the
    /// population standard deviation of the test labels.
    pub delta_perturbation: Option<f64>,
    /// Per-instance similarity thresholds are drawn uniformly from this range.
    pub threshold_min: f64,
    pub threshold_max: f64,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            attacked_fraction: 0.10,
            delta_perturbation: None,
            threshold_min: 0.8,
            threshold_max: 1.0,
            seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.attacked_fraction > 0.0 && self.attacked_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "attacked_fraction must lie in (0, 1], got {}",
                self.attacked_fraction
            )));
        }
        if !(self.threshold_min < self.threshold_max && self.threshold_max <= 1.0) {
            return Err(Error::InvalidConfig("invalid threshold range".into()));
        }
        Ok(())
    }
}

/// Metadata for one attacked row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub index: usize,
    pub threshold: f64,
    pub achieved_similarity: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// An attacked copy of a test set. Labels are the untouched ground truth.
#[derive(Debug, Clone)]
pub struct AttackedTestSet {
    pub data: Dataset,
    pub records: Vec<AttackRecord>,
}

fn loss_at(w: &Weights, x: &DVector<f64>, target: f64) -> f64 {
    adversary_loss(w.0.dot(x), target)
}

/// Rotates `x` toward `x0` (keeping its norm) until the cosine floor holds
/// exactly. Returns `x0`-aligned data if the interpolation degenerates.
fn restore_feasibility(x: &DVector<f64>, x0: &DVector<f64>, delta: f64) -> DVector<f64> {
    let norm_x = x.norm();
    if norm_x == 0.0 {
        return x0.clone();
    }
    let cos = x.dot(x0) / (norm_x * x0.norm());
    if cos >= delta {
        return x.clone();
    }
    let unit_x = x / norm_x;
    let unit_0 = x0 / x0.norm();
    let blend = |t: f64| -> Option<DVector<f64>> {
        let dir = (1.0 - t) * &unit_x + t * &unit_0;
        let n = dir.norm();
        if n < 1e-12 {
            None
        } else {
            Some(dir * (norm_x / n))
        }
    };
    let cos_of = |p: &DVector<f64>| p.dot(x0) / (p.norm() * x0.norm());
    // Bisect for the smallest rotation reaching the floor; t = 1 always
    // satisfies it (cosine 1).
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        match blend(mid) {
            Some(p) if cos_of(&p) >= delta => hi = mid,
            _ => lo = mid,
        }
    }
    blend(hi).unwrap_or_else(|| unit_0 * norm_x)
}

/// Minimizes the augmented-Lagrangian subproblem by gradient descent with
/// backtracking.
fn inner_minimize(
    w: &Weights,
    target: f64,
    x0: &DVector<f64>,
    delta: f64,
    start: &DVector<f64>,
    multiplier: f64,
    penalty: f64,
) -> DVector<f64> {
    let constraint = |x: &DVector<f64>| {
        let nx = x.norm();
        if nx == 0.0 {
            return 1.0 + delta; // worst case, forces retreat
        }
        delta - x.dot(x0) / (nx * x0.norm())
    };
    let objective = |x: &DVector<f64>| {
        let slack = (multiplier / penalty + constraint(x)).max(0.0);
        loss_at(w, x, target) + 0.5 * penalty * slack * slack
    };
    let gradient = |x: &DVector<f64>| -> DVector<f64> {
        let mut grad = 2.0 * (w.0.dot(x) - target) * &w.0;
        let slack = multiplier / penalty + constraint(x);
        if slack > 0.0 {
            if let Ok(gc) = grad_constraint_row(x, x0) {
                grad += penalty * slack * gc;
            }
        }
        grad
    };

    let mut x = start.clone();
    let mut value = objective(&x);
    for _ in 0..150 {
        let grad = gradient(&x);
        if grad.norm() < 1e-11 {
            break;
        }
        let mut alpha = 1.0 / (1.0 + grad.norm());
        let mut moved = false;
        for _ in 0..40 {
            let trial = &x - alpha * &grad;
            let trial_value = objective(&trial);
            if trial_value <= value - 1e-4 * alpha * grad.norm_squared() {
                x = trial;
                value = trial_value;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

fn augmented_lagrangian(
    w: &Weights,
    target: f64,
    x0: &DVector<f64>,
    delta: f64,
    start: &DVector<f64>,
) -> DVector<f64> {
    let constraint = |x: &DVector<f64>| {
        let nx = x.norm();
        if nx == 0.0 {
            return 1.0 + delta;
        }
        delta - x.dot(x0) / (nx * x0.norm())
    };
    let mut x = start.clone();
    let mut multiplier = 0.0;
    let mut penalty = 10.0;
    let mut prev_violation = f64::INFINITY;
    for _ in 0..20 {
        x = inner_minimize(w, target, x0, delta, &x, multiplier, penalty);
        let c = constraint(&x);
        let violation = c.max(0.0);
        multiplier = (multiplier + penalty * c).max(0.0);
        if violation <= 1e-12 {
            break;
        }
        if violation > 0.25 * prev_violation {
            penalty = (penalty * 5.0).min(1e12);
        }
        prev_violation = violation;
    }
    x
}

/// Finds a feasible row minimizing the adversary's loss toward `target`.
///
/// The result satisfies `cos(x, x0) >= delta - 1e-8` and never has larger
/// loss than `x0` itself.
pub fn attack_instance(
    w: &Weights,
    x0: &DVector<f64>,
    target: f64,
    delta: f64,
) -> Result<DVector<f64>> {
    if x0.len() != w.len() {
        return Err(Error::dims("attack feature length", w.len(), x0.len()));
    }
    if x0.norm() == 0.0 {
        return Err(Error::ZeroNormRow { row: 0 });
    }
    if !(delta > -1.0 && delta <= 1.0) {
        return Err(Error::InvalidConfig(format!("delta must lie in (-1, 1], got {delta}")));
    }

    let mut best = x0.clone();
    let mut best_loss = loss_at(w, x0, target);

    let mut consider = |candidate: DVector<f64>| {
        if !candidate.iter().all(|v| v.is_finite()) || candidate.norm() == 0.0 {
            return;
        }
        let cos = candidate.dot(x0) / (candidate.norm() * x0.norm());
        if cos < delta - 1e-8 {
            return;
        }
        let loss = loss_at(w, &candidate, target);
        if loss < best_loss {
            best_loss = loss;
            best = candidate;
        }
    };

    // Pure scaling keeps the cosine at exactly 1 and is the global optimum
    // whenever the scale is positive.
    let along = w.0.dot(x0);
    if along.abs() > 1e-300 {
        let alpha = target / along;
        if alpha > 0.0 {
            consider(alpha * x0);
        }
    }

    // Extremal-direction candidate: over the cone, the prediction per unit
    // norm attains its extremes in the span of w and x0, at angle
    // min(theta, angle(w, x0)) from x0 (toward w to maximize, away to
    // minimize). Scaling that direction hits the target exactly whenever the
    // signs allow.
    let x0h = x0 / x0.norm();
    let c0 = w.0.dot(&x0h);
    let wp = &w.0 - c0 * &x0h;
    let np = wp.norm();
    if w.0.norm() > 0.0 && target != 0.0 {
        let theta = delta.clamp(-1.0, 1.0).acos();
        let theta_w = np.atan2(c0);
        let (phi, sign) = if target > 0.0 {
            (theta_w.min(theta), 1.0)
        } else {
            (theta.min(std::f64::consts::PI - theta_w), -1.0)
        };
        let u = if np > 1e-14 {
            phi.cos() * &x0h + sign * phi.sin() * (&wp / np)
        } else {
            x0h.clone()
        };
        let s = w.0.dot(&u);
        if s.abs() > 1e-300 && target / s > 0.0 {
            consider((target / s) * u);
        }
    }
    // Shrinking toward the origin keeps the cosine at exactly 1 and pushes
    // the loss toward target^2 when the target's sign is unreachable.
    consider(1e-9 * x0);

    if delta < 1.0 - 1e-12 {
        // Multi-start augmented Lagrangian; starts are deterministic.
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        let mut starts = vec![x0.clone()];
        for _ in 0..4 {
            let perturbed = DVector::from_fn(x0.len(), |i, _| {
                x0[i] * (1.0 + 0.3 * rng.random_range(-1.0..1.0))
            });
            starts.push(perturbed);
        }
        for start in &starts {
            let raw = augmented_lagrangian(w, target, x0, delta, start);
            consider(restore_feasibility(&raw, x0, delta));
        }
    }

    Ok(best)
}

/// Replaces a seeded subset of test rows with attacked versions. Labels and
/// unattacked rows are untouched.
pub fn build_attacked_testset(
    test: &Dataset,
    w_reference: &Weights,
    spec: &AttackSpec,
) -> Result<AttackedTestSet> {
    spec.validate()?;
    if test.n_features() != w_reference.len() {
        return Err(Error::dims("attack features", w_reference.len(), test.n_features()));
    }
    let total = test.n_rows();
    let count = (spec.attacked_fraction * total as f64).round() as usize;
    let count = count.min(total);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut indices: Vec<usize> = rand::seq::index::sample(&mut rng, total, count).into_vec();
    indices.sort_unstable();

    let delta_perturbation = spec.delta_perturbation.unwrap_or_else(|| {
        let mean = test.labels.mean();
        let var = test.labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / total as f64;
        2.0 * var.sqrt()
    });

    let mut rows = test.rows.clone();
    let mut records = Vec::with_capacity(count);
    for &index in &indices {
        let threshold = rng.random_range(spec.threshold_min..spec.threshold_max);
        let x0 = test.rows.row(index).transpose();
        let target = test.labels[index] + delta_perturbation;
        let attacked = attack_instance(w_reference, &x0, target, threshold)?;
        let achieved_similarity = cosine_similarity(&attacked, &x0)?;
        records.push(AttackRecord {
            index,
            threshold,
            achieved_similarity,
            loss_before: loss_at(w_reference, &x0, target),
            loss_after: loss_at(w_reference, &attacked, target),
        });
        rows.row_mut(index).copy_from(&attacked.transpose());
    }

    Ok(AttackedTestSet {
        data: Dataset::new(rows, test.labels.clone())?,
        records,
    })
}

/// Helper: builds a matrix from per-row vectors (used by tests and the CLI).
pub fn rows_from_vectors(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let m = rows.len();
    let q = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(m, q, |i, j| rows[i][j])
}
