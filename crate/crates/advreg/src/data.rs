//! CSV loading, min-max normalization, and train/test handling.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AdversaryBlock, Dataset, Weights};

/// Loads a CSV with a header row; every column except `label_column` becomes a
/// feature, in file order.
pub fn load_dataset(path: &Path, label_column: &str) -> Result<Dataset> {
    let display = path.display().to_string();
    let fail = |reason: String| Error::Load { path: display.clone(), reason };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fail(e.to_string()))?;

    let headers = reader.headers().map_err(|e| fail(e.to_string()))?.clone();
    let label_index = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| fail(format!("label column {label_column:?} not found in header")))?;
    let feature_indices: Vec<usize> =
        (0..headers.len()).filter(|&i| i != label_index).collect();
    if feature_indices.is_empty() {
        return Err(fail("no feature columns besides the label".into()));
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| fail(e.to_string()))?;
        if record.len() != headers.len() {
            return Err(fail(format!(
                "row {}: expected {} fields, got {}",
                line + 2,
                headers.len(),
                record.len()
            )));
        }
        let parse = |i: usize| -> Result<f64> {
            record[i].parse::<f64>().map_err(|_| {
                fail(format!(
                    "row {}, column {:?}: cannot parse {:?} as a number",
                    line + 2,
                    &headers[i],
                    &record[i]
                ))
            })
        };
        for &i in &feature_indices {
            rows.push(parse(i)?);
        }
        labels.push(parse(label_index)?);
    }
    if labels.is_empty() {
        return Err(fail("no data rows".into()));
    }

    let n = labels.len();
    let q = feature_indices.len();
    Dataset::new(
        DMatrix::from_row_slice(n, q, &rows),
        DVector::from_vec(labels),
    )
}

/// Per-feature min-max scaler fitted on training data only. Constant columns
/// map to 0.5.
#[derive(Debug, Clone)]
pub struct Normalizer {
    mins: DVector<f64>,
    maxs: DVector<f64>,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Self {
        let q = train.n_features();
        let mut mins = DVector::from_element(q, f64::INFINITY);
        let mut maxs = DVector::from_element(q, f64::NEG_INFINITY);
        for i in 0..train.n_rows() {
            for j in 0..q {
                let v = train.rows[(i, j)];
                mins[j] = mins[j].min(v);
                maxs[j] = maxs[j].max(v);
            }
        }
        Normalizer { mins, maxs }
    }

    pub fn transform_value(&self, j: usize, v: f64) -> f64 {
        let span = self.maxs[j] - self.mins[j];
        if span == 0.0 {
            0.5
        } else {
            (v - self.mins[j]) / span
        }
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        if data.n_features() != self.mins.len() {
            return Err(Error::dims("normalizer features", self.mins.len(), data.n_features()));
        }
        let rows = DMatrix::from_fn(data.n_rows(), data.n_features(), |i, j| {
            self.transform_value(j, data.rows[(i, j)])
        });
        Dataset::new(rows, data.labels.clone())
    }

    pub fn inverse_value(&self, j: usize, v: f64) -> f64 {
        let span = self.maxs[j] - self.mins[j];
        if span == 0.0 {
            self.mins[j]
        } else {
            self.mins[j] + v * span
        }
    }
}

/// Min-max scaler for the label column, fitted on training data only.
/// Keeping labels on the same scale as the min-max normalized features keeps
/// the stationarity system well-conditioned.
#[derive(Debug, Clone)]
pub struct LabelScaler {
    min: f64,
    max: f64,
}

impl LabelScaler {
    pub fn fit(train: &Dataset) -> Self {
        LabelScaler { min: train.labels.min(), max: train.labels.max() }
    }

    pub fn scale(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span == 0.0 {
            0.5
        } else {
            (v - self.min) / span
        }
    }

    pub fn inverse(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span == 0.0 {
            self.min
        } else {
            self.min + v * span
        }
    }

    pub fn transform(&self, data: &Dataset) -> Dataset {
        let labels = DVector::from_fn(data.n_rows(), |i, _| self.scale(data.labels[i]));
        Dataset { rows: data.rows.clone(), labels }
    }
}

/// Splits `data` into train/test by a seeded shuffle. The training size is
/// `floor(ratio * n + 0.5)`.
pub fn split(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = data.n_rows();
    let n_train = (ratio * n as f64 + 0.5).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidConfig(format!(
            "split of {n} rows at ratio {ratio} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let take = |indices: &[usize]| {
        let rows = DMatrix::from_fn(indices.len(), data.n_features(), |i, j| {
            data.rows[(indices[i], j)]
        });
        let labels = DVector::from_fn(indices.len(), |i, _| data.labels[indices[i]]);
        Dataset::new(rows, labels)
    };
    Ok((take(&order[..n_train])?, take(&order[n_train..])?))
}

/// Carves `m` seeded rows out of the training set as the adversary's block
/// (targets shifted by `nu`); the rest stay as static data.
pub fn make_training_split(
    train: &Dataset,
    m: usize,
    nu: f64,
    seed: u64,
) -> Result<(Dataset, AdversaryBlock)> {
    let n = train.n_rows();
    if m == 0 || m >= n {
        return Err(Error::InvalidConfig(format!(
            "adversary block size {m} must lie in [1, {})",
            n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, n, m).into_vec();
    chosen.sort_unstable();
    let chosen_set: Vec<bool> = {
        let mut mask = vec![false; n];
        for &i in &chosen {
            mask[i] = true;
        }
        mask
    };
    let rest: Vec<usize> = (0..n).filter(|&i| !chosen_set[i]).collect();

    let gather_rows = |indices: &[usize]| {
        DMatrix::from_fn(indices.len(), train.n_features(), |i, j| train.rows[(indices[i], j)])
    };
    let gather_labels =
        |indices: &[usize]| DVector::from_fn(indices.len(), |i, _| train.labels[indices[i]]);

    let static_data = Dataset::new(gather_rows(&rest), gather_labels(&rest))?;
    let adversary = AdversaryBlock::new(gather_rows(&chosen), gather_labels(&chosen), nu)?;
    Ok((static_data, adversary))
}

/// Mean squared prediction error over a dataset.
pub fn evaluate_mse(w: &Weights, data: &Dataset) -> Result<f64> {
    if data.n_features() != w.len() {
        return Err(Error::dims("mse features", w.len(), data.n_features()));
    }
    let residual = &data.rows * &w.0 - &data.labels;
    Ok(residual.norm_squared() / data.n_rows() as f64)
}

/// Per-feature mean absolute displacement of the adversary block from its
/// origin: entry `j` is `(1/m) * sum_i |X_ij - X0_ij|`.
pub fn feature_movement(adversary: &AdversaryBlock) -> DVector<f64> {
    let m = adversary.n_rows();
    let q = adversary.n_features();
    DVector::from_fn(q, |j, _| {
        (0..m)
            .map(|i| (adversary.current[(i, j)] - adversary.origin[(i, j)]).abs())
            .sum::<f64>()
            / m as f64
    })
}
