//! Experiment harness: grid sweeps over adversary block size and similarity
//! threshold, with seeded splits, a shared attacked test set per seed, and
//! deterministic reports.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{build_attacked_testset, AttackSpec, AttackedTestSet};
use crate::baselines::{fit_bs, fit_linreg, BsConfig};
use crate::data::{
    evaluate_mse, feature_movement, load_dataset, make_training_split, split, LabelScaler,
    Normalizer,
};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelConfig, Weights};
use crate::solver::{default_start, solve, SolveStatus, SolverConfig};
use crate::stationarity::BilevelProblem;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// CSV file to sweep over; may be overridden on the command line.
    pub dataset: Option<PathBuf>,
    pub label_column: String,
    pub split_ratio: f64,
    pub m_grid: Vec<usize>,
    pub delta_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Ridge strength for the upper objective and the plain baseline.
    pub ridge: Option<f64>,
    /// Adversary target offset; `None` uses twice the standard deviation of
    /// the training labels.
    pub nu: Option<f64>,
    pub attack: AttackSpec,
    pub solver: SolverConfig,
    pub bs: BsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            label_column: "label".into(),
            split_ratio: 0.8,
            m_grid: vec![1, 2, 3, 5, 8, 13, 21, 34],
            delta_grid: vec![0.85, 0.90, 0.95, 0.99],
            seeds: vec![0, 1, 2, 3, 4],
            ridge: Some(100.0),
            nu: None,
            attack: AttackSpec::default(),
            solver: SolverConfig::default(),
            bs: BsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_grid.is_empty() || self.delta_grid.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("empty sweep grid".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::InvalidConfig("split_ratio must lie in (0, 1)".into()));
        }
        for &d in &self.delta_grid {
            if !(d > -1.0 && d <= 1.0) {
                return Err(Error::InvalidConfig(format!("delta {d} out of range")));
            }
        }
        self.attack.validate()?;
        self.solver.validate()?;
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let config: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Load {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }
}

/// One sweep cell: a (seed, m, delta) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub seed: u64,
    pub m: usize,
    pub delta: f64,
    pub status: String,
    pub iterations: usize,
    pub residual_norm: f64,
    pub bilevel_mse_clean: f64,
    pub bilevel_mse_attacked: f64,
    pub linreg_mse_clean: f64,
    pub linreg_mse_attacked: f64,
    pub bs_mse_clean: f64,
    pub bs_mse_attacked: f64,
    pub feature_movement: Vec<f64>,
    pub error: Option<String>,
}

/// Mean and population standard deviation of the bilevel attacked error over
/// seeds, per grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub m: usize,
    pub delta: f64,
    pub bilevel_attacked_mean: f64,
    pub bilevel_attacked_std: f64,
    pub linreg_attacked_mean: f64,
    pub bs_attacked_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub dataset_name: String,
    pub dataset_checksum: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
    pub aggregates: Vec<AggregateRecord>,
}

impl PartialEq for ExperimentConfig {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_string(self).ok() == serde_json::to_string(other).ok()
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let json = serde_json::to_vec(config)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(&json);
    Ok(hex_digest(hasher))
}

pub fn dataset_checksum(data: &Dataset) -> String {
    let mut hasher = Sha256::new();
    for v in data.rows.iter() {
        hasher.update(v.to_le_bytes());
    }
    for v in data.labels.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex_digest(hasher)
}

fn population_std(values: &DVector<f64>) -> f64 {
    let mean = values.mean();
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

fn status_name(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::Converged => "converged",
        SolveStatus::Stalled => "stalled",
        SolveStatus::MaxIterations => "max-iterations",
    }
}

/// Per-seed context shared by every (m, delta) cell: the split, normalization
/// fitted on train only, the plain baseline, and the attacked test set built
/// once against the baseline weights.
struct SeedContext {
    seed: u64,
    train: Dataset,
    test: Dataset,
    attacked: AttackedTestSet,
    linreg: Weights,
    nu: f64,
}

fn build_seed_context(data: &Dataset, config: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let (train_raw, test_raw) = split(data, config.split_ratio, seed)?;
    let normalizer = Normalizer::fit(&train_raw);
    let labels = LabelScaler::fit(&train_raw);
    let train = labels.transform(&normalizer.transform(&train_raw)?);
    let test = labels.transform(&normalizer.transform(&test_raw)?);
    let linreg = fit_linreg(&train, config.ridge)?;
    let nu = config.nu.unwrap_or_else(|| 2.0 * population_std(&train.labels));
    let attack = AttackSpec { seed, ..config.attack.clone() };
    let attacked = build_attacked_testset(&test, &linreg, &attack)?;
    Ok(SeedContext { seed, train, test, attacked, linreg, nu })
}

fn run_cells_for_block(
    ctx: &SeedContext,
    config: &ExperimentConfig,
    m: usize,
) -> Vec<CellRecord> {
    // Stable derived seed for the adversary block selection.
    let block_seed = ctx.seed.wrapping_mul(1009).wrapping_add(m as u64);

    let prepared = make_training_split(&ctx.train, m, ctx.nu, block_seed);
    let (static_data, adversary) = match prepared {
        Ok(parts) => parts,
        Err(e) => {
            return config
                .delta_grid
                .iter()
                .map(|&delta| error_cell(ctx, m, delta, &e.to_string()))
                .collect();
        }
    };

    let linreg_clean = evaluate_mse(&ctx.linreg, &ctx.test).unwrap_or(f64::NAN);
    let linreg_attacked = evaluate_mse(&ctx.linreg, &ctx.attacked.data).unwrap_or(f64::NAN);

    config
        .delta_grid
        .iter()
        .map(|&delta| {
            let model_config = ModelConfig { delta, ridge: config.ridge, nu: ctx.nu };
            let cell = (|| -> Result<CellRecord> {
                let problem = BilevelProblem::new(
                    static_data.clone(),
                    adversary.clone(),
                    model_config,
                )?;
                let start = default_start(&problem)?;
                let outcome = solve(&problem, &start, &config.solver)?;
                let weights = Weights(outcome.point.weights());
                let solved_adversary =
                    adversary.clone().with_current(outcome.point.x_matrix())?;

                let bs_fit = fit_bs(&problem, &config.bs)?;

                Ok(CellRecord {
                    seed: ctx.seed,
                    m,
                    delta,
                    status: status_name(outcome.status).into(),
                    iterations: outcome.trace.len().saturating_sub(1),
                    residual_norm: outcome.residual_norm,
                    bilevel_mse_clean: evaluate_mse(&weights, &ctx.test)?,
                    bilevel_mse_attacked: evaluate_mse(&weights, &ctx.attacked.data)?,
                    linreg_mse_clean: linreg_clean,
                    linreg_mse_attacked: linreg_attacked,
                    bs_mse_clean: evaluate_mse(&bs_fit.weights, &ctx.test)?,
                    bs_mse_attacked: evaluate_mse(&bs_fit.weights, &ctx.attacked.data)?,
                    feature_movement: feature_movement(&solved_adversary).iter().copied().collect(),
                    error: None,
                })
            })();
            cell.unwrap_or_else(|e| error_cell(ctx, m, delta, &e.to_string()))
        })
        .collect()
}

fn error_cell(ctx: &SeedContext, m: usize, delta: f64, message: &str) -> CellRecord {
    CellRecord {
        seed: ctx.seed,
        m,
        delta,
        status: "error".into(),
        iterations: 0,
        residual_norm: f64::NAN,
        bilevel_mse_clean: f64::NAN,
        bilevel_mse_attacked: f64::NAN,
        linreg_mse_clean: f64::NAN,
        linreg_mse_attacked: f64::NAN,
        bs_mse_clean: f64::NAN,
        bs_mse_attacked: f64::NAN,
        feature_movement: Vec::new(),
        error: Some(message.to_string()),
    }
}

fn aggregate(cells: &[CellRecord], config: &ExperimentConfig) -> Vec<AggregateRecord> {
    let mut out = Vec::new();
    for &m in &config.m_grid {
        for &delta in &config.delta_grid {
            let values: Vec<&CellRecord> = cells
                .iter()
                .filter(|c| c.m == m && c.delta == delta && c.error.is_none())
                .collect();
            if values.is_empty() {
                continue;
            }
            let mean = |f: fn(&CellRecord) -> f64| {
                values.iter().map(|c| f(c)).sum::<f64>() / values.len() as f64
            };
            let bilevel_mean = mean(|c| c.bilevel_mse_attacked);
            let bilevel_var = values
                .iter()
                .map(|c| (c.bilevel_mse_attacked - bilevel_mean).powi(2))
                .sum::<f64>()
                / values.len() as f64;
            out.push(AggregateRecord {
                m,
                delta,
                bilevel_attacked_mean: bilevel_mean,
                bilevel_attacked_std: bilevel_var.sqrt(),
                linreg_attacked_mean: mean(|c| c.linreg_mse_attacked),
                bs_attacked_mean: mean(|c| c.bs_mse_attacked),
            });
        }
    }
    out
}

/// Runs the full sweep on in-memory data. Cells are computed in parallel and
/// sorted afterwards, so the report is deterministic for a fixed config.
pub fn run_sweep_on(
    data: &Dataset,
    dataset_name: &str,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    config.validate()?;

    let contexts: Vec<SeedContext> = config
        .seeds
        .par_iter()
        .map(|&seed| build_seed_context(data, config, seed))
        .collect::<Result<_>>()?;

    let tasks: Vec<(&SeedContext, usize)> = contexts
        .iter()
        .flat_map(|ctx| config.m_grid.iter().map(move |&m| (ctx, m)))
        .collect();
    let mut cells: Vec<CellRecord> = tasks
        .par_iter()
        .flat_map_iter(|(ctx, m)| run_cells_for_block(ctx, config, *m))
        .collect();
    cells.sort_by(|a, b| {
        (a.seed, a.m)
            .cmp(&(b.seed, b.m))
            .then(a.delta.partial_cmp(&b.delta).unwrap_or(std::cmp::Ordering::Equal))
    });

    let aggregates = aggregate(&cells, config);
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset_name: dataset_name.to_string(),
        dataset_checksum: dataset_checksum(data),
        config_hash: config_hash(config)?,
        config: config.clone(),
        cells,
        aggregates,
    })
}

/// Loads the configured dataset from disk and runs the sweep.
pub fn run_sweep(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let path = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no dataset configured".into()))?;
    let data = load_dataset(path, &config.label_column)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    run_sweep_on(&data, &name, config)
}

/// Writes `report_<hash>.json` and `cells_<hash>.csv` under `out_dir` and
/// returns the two paths. Output contains no timestamps.
pub fn write_report(report: &ExperimentReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let tag = &report.config_hash[..16.min(report.config_hash.len())];

    let json_path = out_dir.join(format!("report_{tag}.json"));
    let json = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialize report: {e}")))?;
    fs::write(&json_path, json)?;

    let csv_path = out_dir.join(format!("cells_{tag}.csv"));
    let mut writer = csv::Writer::from_path(&csv_path)?;
    writer
        .write_record([
            "seed",
            "m",
            "delta",
            "status",
            "iterations",
            "residual_norm",
            "bilevel_mse_clean",
            "bilevel_mse_attacked",
            "linreg_mse_clean",
            "linreg_mse_attacked",
            "bs_mse_clean",
            "bs_mse_attacked",
            "feature_movement",
            "error",
        ])
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for cell in &report.cells {
        let movement = cell
            .feature_movement
            .iter()
            .map(|v| format!("{v:.12e}"))
            .collect::<Vec<_>>()
            .join(";");
        writer
            .write_record([
                cell.seed.to_string(),
                cell.m.to_string(),
                format!("{:.6}", cell.delta),
                cell.status.clone(),
                cell.iterations.to_string(),
                format!("{:.12e}", cell.residual_norm),
                format!("{:.12e}", cell.bilevel_mse_clean),
                format!("{:.12e}", cell.bilevel_mse_attacked),
                format!("{:.12e}", cell.linreg_mse_clean),
                format!("{:.12e}", cell.linreg_mse_attacked),
                format!("{:.12e}", cell.bs_mse_clean),
                format!("{:.12e}", cell.bs_mse_attacked),
                movement,
                cell.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    writer.flush()?;
    Ok((json_path, csv_path))
}
