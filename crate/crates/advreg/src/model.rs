//! Domain types, prediction, losses, objectives and the similarity
//! constraints of the adversarial regression game.
//!
//! The learner picks weights `w` for the linear predictor `w^T x`. The
//! adversary owns a block of `m` rows it may move away from their original
//! values, subject to a per-row cosine-similarity floor `delta`. The learner's
//! objective averages squared error over the static rows and the adversary's
//! rows (with their true labels); the adversary's objective pulls its rows
//! toward target labels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of feature rows with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Feature matrix, one instance per row.
    pub rows: DMatrix<f64>,
    /// Labels, one per row.
    pub labels: DVector<f64>,
}

impl Dataset {
    pub fn new(rows: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::Empty("dataset must have at least one row and one feature"));
        }
        if labels.len() != rows.nrows() {
            return Err(Error::dims("dataset labels", rows.nrows(), labels.len()));
        }
        Ok(Dataset { rows, labels })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }
}

/// The adversary's block of manipulable data.
///
/// `current` is the data as seen by the learner; `origin` is where it started
/// and is never moved. Target labels are the true labels shifted upward by a
/// fixed offset at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryBlock {
    pub current: DMatrix<f64>,
    pub origin: DMatrix<f64>,
    pub true_labels: DVector<f64>,
    pub target_labels: DVector<f64>,
}

impl AdversaryBlock {
    /// Builds a block starting at `origin` with targets `true_labels + nu`.
    pub fn new(origin: DMatrix<f64>, true_labels: DVector<f64>, nu: f64) -> Result<Self> {
        if origin.nrows() == 0 || origin.ncols() == 0 {
            return Err(Error::Empty("adversary block must have at least one row"));
        }
        if true_labels.len() != origin.nrows() {
            return Err(Error::dims("adversary labels", origin.nrows(), true_labels.len()));
        }
        if nu < 0.0 || !nu.is_finite() {
            return Err(Error::InvalidConfig(format!("target offset nu must be >= 0, got {nu}")));
        }
        for i in 0..origin.nrows() {
            if origin.row(i).norm() == 0.0 {
                return Err(Error::ZeroNormRow { row: i });
            }
        }
        let target_labels = true_labels.add_scalar(nu);
        Ok(AdversaryBlock {
            current: origin.clone(),
            origin,
            true_labels,
            target_labels,
        })
    }

    /// Replaces the current data, keeping origin and labels.
    pub fn with_current(mut self, current: DMatrix<f64>) -> Result<Self> {
        if current.shape() != self.origin.shape() {
            return Err(Error::dims(
                "adversary current shape",
                self.origin.nrows() * self.origin.ncols(),
                current.nrows() * current.ncols(),
            ));
        }
        self.current = current;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.origin.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.origin.ncols()
    }
}

/// Weights of the linear predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(pub DVector<f64>);

impl Weights {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }
}

/// Model-level configuration shared by training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Minimum cosine similarity the adversary must keep to its origin.
    pub delta: f64,
    /// Ridge weight rho; the objective carries a `(1/rho)||w||^2` term when
    /// set. `None` disables the term (and the matching gradient terms).
    pub ridge: Option<f64>,
    /// Offset added to true labels to form the adversary's training targets.
    pub nu: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > -1.0 && self.delta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta must lie in (-1, 1], got {}",
                self.delta
            )));
        }
        if let Some(rho) = self.ridge {
            if !(rho > 0.0) {
                return Err(Error::InvalidConfig(format!("ridge rho must be > 0, got {rho}")));
            }
        }
        if self.nu < 0.0 {
            return Err(Error::InvalidConfig(format!("nu must be >= 0, got {}", self.nu)));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            delta: 0.95,
            ridge: Some(100.0),
            nu: 0.0,
        }
    }
}

/// Linear prediction `w^T x`.
pub fn predict(w: &Weights, x: &DVector<f64>) -> Result<f64> {
    if w.len() != x.len() {
        return Err(Error::dims("predict feature length", w.len(), x.len()));
    }
    Ok(w.0.dot(x))
}

/// Learner's squared-error loss.
pub fn learner_loss(prediction: f64, label: f64) -> f64 {
    let r = prediction - label;
    r * r
}

/// Adversary's loss: squared distance of the prediction from its target.
/// Identical in form to [`learner_loss`].
pub fn adversary_loss(prediction: f64, target: f64) -> f64 {
    learner_loss(prediction, target)
}

/// Learner's objective: mean squared error over the static rows plus mean
/// squared error over the adversary's rows (against true labels), plus an
/// optional `(1/rho)||w||^2` ridge term.
pub fn upper_objective(
    w: &Weights,
    adversary: &AdversaryBlock,
    static_data: &Dataset,
    cfg: &ModelConfig,
) -> Result<f64> {
    let q = w.len();
    if static_data.n_features() != q {
        return Err(Error::dims("upper objective static features", q, static_data.n_features()));
    }
    if adversary.n_features() != q {
        return Err(Error::dims("upper objective adversary features", q, adversary.n_features()));
    }
    let n = static_data.n_rows() as f64;
    let m = adversary.n_rows() as f64;

    let static_res = &static_data.rows * &w.0 - &static_data.labels;
    let adv_res = &adversary.current * &w.0 - &adversary.true_labels;
    let mut value = static_res.norm_squared() / n + adv_res.norm_squared() / m;
    if let Some(rho) = cfg.ridge {
        value += w.0.norm_squared() / rho;
    }
    Ok(value)
}

/// Adversary's objective: mean squared distance of its rows' predictions from
/// the target labels.
pub fn lower_objective(w: &Weights, adversary: &AdversaryBlock) -> Result<f64> {
    if adversary.n_features() != w.len() {
        return Err(Error::dims("lower objective features", w.len(), adversary.n_features()));
    }
    let m = adversary.n_rows() as f64;
    let res = &adversary.current * &w.0 - &adversary.target_labels;
    Ok(res.norm_squared() / m)
}

/// Cosine similarity of two feature rows.
pub fn cosine_similarity(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("cosine similarity length", a.len(), b.len()));
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 {
        return Err(Error::ZeroNormRow { row: 0 });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNormRow { row: 1 });
    }
    Ok(a.dot(b) / (na * nb))
}

/// Constraint vector `g` with components `delta - cos(X_i, X0_i)`.
/// Feasible means every component is `<= 0`.
pub fn constraint_values(adversary: &AdversaryBlock, delta: f64) -> Result<DVector<f64>> {
    let m = adversary.n_rows();
    let mut g = DVector::zeros(m);
    for i in 0..m {
        let xi = adversary.current.row(i).transpose();
        let oi = adversary.origin.row(i).transpose();
        if xi.norm() == 0.0 || oi.norm() == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        g[i] = delta - cosine_similarity(&xi, &oi)?;
    }
    Ok(g)
}
