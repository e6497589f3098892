//! Deterministic synthetic fixtures: toy problems with known stationary
//! points, and tabular datasets with the shapes of the two benchmark corpora
//! (11 features x 4898 rows, 6 features x 414 rows) for offline runs.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{AdversaryBlock, Dataset, ModelConfig};
use crate::stationarity::{BilevelProblem, BlockVariable};

/// Builds a bilevel problem together with an exact zero-residual point.
///
/// Construction: pick `w` at random, set the static labels to `D w`, place the
/// adversary at its origin with labels and targets both equal to `X0 w`, and
/// zero all multipliers. Every stationarity row then vanishes exactly (ridge
/// disabled), the constraints are strictly feasible, and complementarity holds
/// with zero multipliers.
pub fn consistent_toy_problem(
    q: usize,
    m: usize,
    n: usize,
    seed: u64,
) -> (BilevelProblem, BlockVariable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DVector::from_fn(q, |_, _| rng.random_range(0.2..1.0));
    let d = DMatrix::from_fn(n, q, |_, _| rng.random_range(0.1..1.0));
    let gamma = &d * &w;
    let origin = DMatrix::from_fn(m, q, |_, _| rng.random_range(0.1..1.0));
    let labels = &origin * &w;

    let static_data = Dataset::new(d, gamma).expect("valid static data");
    let adversary = AdversaryBlock::new(origin.clone(), labels, 0.0).expect("valid adversary");
    let config = ModelConfig { delta: 0.9, ridge: None, nu: 0.0 };
    let problem = BilevelProblem::new(static_data, adversary, config).expect("valid problem");

    let zeros = DVector::zeros(m);
    let point = BlockVariable::from_parts(&w, &origin, &zeros, &zeros, 0.0).expect("valid point");
    (problem, point)
}

/// A generated table ready to be written as CSV.
#[derive(Debug, Clone)]
pub struct SyntheticTable {
    pub feature_names: Vec<String>,
    pub label_name: String,
    /// One row per instance, feature order matching `feature_names`.
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl SyntheticTable {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// In-memory view matching what [`write_csv`](Self::write_csv) followed by
    /// a CSV load would produce (values rounded to six decimals).
    pub fn to_dataset(&self) -> Dataset {
        let n = self.n_rows();
        let q = self.feature_names.len();
        let round6 = |v: f64| (v * 1e6).round() / 1e6;
        let rows = DMatrix::from_fn(n, q, |i, j| round6(self.rows[i][j]));
        let labels = DVector::from_fn(n, |i, _| round6(self.labels[i]));
        Dataset::new(rows, labels).expect("generated table is a valid dataset")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header: Vec<&str> = self.feature_names.iter().map(|s| s.as_str()).collect();
        header.push(&self.label_name);
        writeln!(file, "{}", header.join(","))?;
        for (row, label) in self.rows.iter().zip(self.labels.iter()) {
            let mut cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            cells.push(format!("{label:.6}"));
            writeln!(file, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn generate_table(
    seed: u64,
    n_rows: usize,
    feature_names: &[&str],
    label_name: &str,
    ranges: &[(f64, f64)],
    coefficients: &[f64],
    label_range: (f64, f64),
    noise: f64,
) -> SyntheticTable {
    assert_eq!(feature_names.len(), ranges.len());
    assert_eq!(feature_names.len(), coefficients.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = feature_names.len();
    let coeff_sum: f64 = coefficients.iter().map(|c| c.abs()).sum();

    let mut rows = Vec::with_capacity(n_rows);
    let mut labels = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let mut row = Vec::with_capacity(q);
        let mut signal = 0.0;
        for j in 0..q {
            let u: f64 = rng.random_range(0.0..1.0);
            let (lo, hi) = ranges[j];
            row.push(lo + u * (hi - lo));
            signal += coefficients[j] * if coefficients[j] >= 0.0 { u } else { 1.0 - u };
        }
        // Approximate Gaussian noise from a sum of uniforms.
        let eps: f64 = (0..4).map(|_| rng.random_range(-0.5..0.5)).sum::<f64>() / 2.0;
        let t = ((signal / coeff_sum) + noise * eps).clamp(0.0, 1.0);
        let (lo, hi) = label_range;
        labels.push(lo + t * (hi - lo));
        rows.push(row);
    }
    SyntheticTable {
        feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
        label_name: label_name.to_string(),
        rows,
        labels,
    }
}

/// 4898 rows, 11 physico-chemical features, quality score label.
pub fn wine_quality_like() -> SyntheticTable {
    generate_table(
        20_240_001,
        4898,
        &[
            "fixed acidity",
            "volatile acidity",
            "citric acid",
            "residual sugar",
            "chlorides",
            "free sulfur dioxide",
            "total sulfur dioxide",
            "density",
            "pH",
            "sulphates",
            "alcohol",
        ],
        "quality",
        &[
            (4.6, 15.9),
            (0.12, 1.58),
            (0.0, 1.0),
            (0.9, 15.5),
            (0.012, 0.61),
            (1.0, 72.0),
            (6.0, 289.0),
            (0.990, 1.004),
            (2.74, 4.01),
            (0.33, 2.0),
            (8.4, 14.9),
        ],
        &[0.3, -0.9, 0.2, 0.15, -0.5, 0.1, -0.9, -0.6, 0.1, 0.5, 0.6],
        (3.0, 9.0),
        0.18,
    )
}

/// 414 rows, 6 housing features, price-per-area label.
pub fn real_estate_like() -> SyntheticTable {
    generate_table(
        20_240_002,
        414,
        &[
            "transaction date",
            "house age",
            "distance to the nearest MRT station",
            "number of convenience stores",
            "latitude",
            "longitude",
        ],
        "house price of unit area",
        &[
            (2012.67, 2013.58),
            (0.0, 43.8),
            (23.4, 6488.0),
            (0.0, 10.0),
            (24.93, 25.01),
            (121.47, 121.57),
        ],
        &[0.1, -0.6, -1.3, 0.7, 0.4, 0.2],
        (7.6, 117.5),
        0.18,
    )
}
