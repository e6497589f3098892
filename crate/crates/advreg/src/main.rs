//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/configuration error,
//! 3 solver did not converge under `--strict`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use advreg::attack::build_attacked_testset;
use advreg::baselines::fit_linreg;
use advreg::calculus::derivative_check_suite;
use advreg::data::{
    evaluate_mse, feature_movement, load_dataset, make_training_split, split, LabelScaler,
    Normalizer,
};
use advreg::experiment::{run_sweep, write_report, ExperimentConfig};
use advreg::model::{Dataset, ModelConfig, Weights};
use advreg::solver::{default_start, solve};
use advreg::{BilevelProblem, Error, Result, SolveStatus};

#[derive(Parser)]
#[command(
    name = "advreg",
    version,
    about = "Adversarially resilient linear regression: training, attacks, and sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory for generated files.
    #[arg(long, global = true, env = "ADVREG_OUT", default_value = "out")]
    out: PathBuf,

    /// TOML experiment configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Thread count for parallel work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Fail with exit code 3 when the solver does not converge.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV dataset with a header row.
    #[arg(long)]
    dataset: Option<PathBuf>,

    /// Name of the label column.
    #[arg(long)]
    label_column: Option<String>,

    /// Seed for splits, block selection, and attacks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train the bilevel model on one (m, delta) cell and save the weights.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Number of adversary-controlled training rows.
        #[arg(long, default_value_t = 5)]
        m: usize,
        /// Cosine-similarity threshold in (-1, 1].
        #[arg(long, default_value_t = 0.95)]
        delta: f64,
    },
    /// Attack the test split against a plain ridge fit and save the result.
    Attack {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate saved weights on a dataset (mean squared error).
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Weights JSON produced by `fit`.
        #[arg(long)]
        weights: PathBuf,
    },
    /// Run the full (m, delta, seed) grid sweep and write a report.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train one cell and report per-feature adversary movement.
    Movement {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5)]
        m: usize,
        #[arg(long, default_value_t = 0.95)]
        delta: f64,
    },
    /// Verify analytic derivatives against finite differences.
    CheckDerivatives {
        /// Number of random instances.
        #[arg(long, default_value_t = 25)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    weights: Vec<f64>,
    status: String,
    residual_norm: f64,
    m: usize,
    delta: f64,
    seed: u64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(2);
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match cli_config {
        Some(path) => ExperimentConfig::from_toml_file(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn resolve_dataset(config: &mut ExperimentConfig, data: &DataArgs) -> Result<Dataset> {
    if let Some(path) = &data.dataset {
        config.dataset = Some(path.clone());
    }
    if let Some(label) = &data.label_column {
        config.label_column = label.clone();
    }
    let path = config
        .dataset
        .clone()
        .ok_or_else(|| Error::InvalidConfig("no dataset given (use --dataset)".into()))?;
    load_dataset(&path, &config.label_column)
}

fn population_std(values: &DVector<f64>) -> f64 {
    let mean = values.mean();
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

struct FittedCell {
    problem: BilevelProblem,
    outcome: advreg::SolveOutcome,
}

fn fit_cell(
    config: &ExperimentConfig,
    raw: &Dataset,
    seed: u64,
    m: usize,
    delta: f64,
) -> Result<FittedCell> {
    let (train_raw, _test_raw) = split(raw, config.split_ratio, seed)?;
    let normalizer = Normalizer::fit(&train_raw);
    let train = LabelScaler::fit(&train_raw).transform(&normalizer.transform(&train_raw)?);
    let nu = config.nu.unwrap_or_else(|| 2.0 * population_std(&train.labels));
    let block_seed = seed.wrapping_mul(1009).wrapping_add(m as u64);
    let (static_data, adversary) = make_training_split(&train, m, nu, block_seed)?;
    let model_config = ModelConfig { delta, ridge: config.ridge, nu };
    let problem = BilevelProblem::new(static_data, adversary, model_config)?;
    let start = default_start(&problem)?;
    let outcome = solve(&problem, &start, &config.solver)?;
    Ok(FittedCell { problem, outcome })
}

fn status_name(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::Converged => "converged",
        SolveStatus::Stalled => "stalled",
        SolveStatus::MaxIterations => "max-iterations",
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialize output: {e}")))?;
    fs::write(path, bytes)?;
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("cannot configure thread pool: {e}")))?;
    }
    let mut config = load_config(&cli.config)?;
    fs::create_dir_all(&cli.out)?;

    match &cli.command {
        Command::Fit { data, m, delta } => {
            let raw = resolve_dataset(&mut config, data)?;
            let cell = fit_cell(&config, &raw, data.seed, *m, *delta)?;
            let weights = cell.outcome.point.weights();
            let out_path = cli.out.join(format!("weights_seed{}_m{}_d{delta}.json", data.seed, m));
            write_json(
                &out_path,
                &WeightsFile {
                    weights: weights.iter().copied().collect(),
                    status: status_name(cell.outcome.status).into(),
                    residual_norm: cell.outcome.residual_norm,
                    m: *m,
                    delta: *delta,
                    seed: data.seed,
                },
            )?;
            println!(
                "fit: status={} residual={:.3e} weights={}",
                status_name(cell.outcome.status),
                cell.outcome.residual_norm,
                out_path.display()
            );
            if cli.strict && cell.outcome.status != SolveStatus::Converged {
                return Ok(3);
            }
            Ok(0)
        }
        Command::Attack { data } => {
            let raw = resolve_dataset(&mut config, data)?;
            let (train_raw, test_raw) = split(&raw, config.split_ratio, data.seed)?;
            let normalizer = Normalizer::fit(&train_raw);
            let labels = LabelScaler::fit(&train_raw);
            let train = labels.transform(&normalizer.transform(&train_raw)?);
            let test = labels.transform(&normalizer.transform(&test_raw)?);
            let w = fit_linreg(&train, config.ridge)?;
            let spec = advreg::attack::AttackSpec { seed: data.seed, ..config.attack.clone() };
            let attacked = build_attacked_testset(&test, &w, &spec)?;

            let csv_path = cli.out.join(format!("attacked_seed{}.csv", data.seed));
            let mut writer = csv::Writer::from_path(&csv_path)?;
            let mut header: Vec<String> =
                (0..test.n_features()).map(|j| format!("f{j}")).collect();
            header.push(config.label_column.clone());
            writer
                .write_record(&header)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            for i in 0..attacked.data.n_rows() {
                let mut record: Vec<String> = (0..attacked.data.n_features())
                    .map(|j| format!("{:.12e}", attacked.data.rows[(i, j)]))
                    .collect();
                record.push(format!("{:.12e}", attacked.data.labels[i]));
                writer
                    .write_record(&record)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            }
            writer.flush()?;

            let records_path = cli.out.join(format!("attack_records_seed{}.json", data.seed));
            write_json(&records_path, &attacked.records)?;
            println!(
                "attack: {} of {} rows attacked -> {} / {}",
                attacked.records.len(),
                attacked.data.n_rows(),
                csv_path.display(),
                records_path.display()
            );
            Ok(0)
        }
        Command::Eval { data, weights } => {
            let raw = resolve_dataset(&mut config, data)?;
            let text = fs::read_to_string(weights).map_err(|e| Error::Load {
                path: weights.display().to_string(),
                reason: e.to_string(),
            })?;
            let file: WeightsFile = serde_json::from_str(&text).map_err(|e| Error::Load {
                path: weights.display().to_string(),
                reason: e.to_string(),
            })?;
            let w = Weights(DVector::from_vec(file.weights));
            let mse = evaluate_mse(&w, &raw)?;
            println!("eval: mse={mse:.12e} rows={}", raw.n_rows());
            Ok(0)
        }
        Command::Sweep { data } => {
            if let Some(path) = &data.dataset {
                config.dataset = Some(path.clone());
            }
            if let Some(label) = &data.label_column {
                config.label_column = label.clone();
            }
            let report = run_sweep(&config)?;
            let (json_path, csv_path) = write_report(&report, &cli.out)?;
            let non_converged = report
                .cells
                .iter()
                .filter(|c| c.status != "converged")
                .count();
            println!(
                "sweep: {} cells ({} not converged) -> {} / {}",
                report.cells.len(),
                non_converged,
                json_path.display(),
                csv_path.display()
            );
            if cli.strict && non_converged > 0 {
                return Ok(3);
            }
            Ok(0)
        }
        Command::Movement { data, m, delta } => {
            let raw = resolve_dataset(&mut config, data)?;
            let cell = fit_cell(&config, &raw, data.seed, *m, *delta)?;
            let solved = cell
                .problem
                .adversary
                .clone()
                .with_current(cell.outcome.point.x_matrix())?;
            let movement = feature_movement(&solved);
            let out_path =
                cli.out.join(format!("movement_seed{}_m{}_d{delta}.json", data.seed, m));
            write_json(&out_path, &movement.iter().copied().collect::<Vec<f64>>())?;
            for (j, v) in movement.iter().enumerate() {
                println!("feature {j}: {v:.6e}");
            }
            println!("movement: written to {}", out_path.display());
            if cli.strict && cell.outcome.status != SolveStatus::Converged {
                return Ok(3);
            }
            Ok(0)
        }
        Command::CheckDerivatives { trials, seed } => {
            let reports = derivative_check_suite(*trials, *seed)?;
            let mut all_pass = true;
            for report in &reports {
                println!(
                    "{}: max relative error {:.3e} (tolerance {:.1e}) [{}]",
                    report.name,
                    report.max_rel_error,
                    report.tol,
                    if report.pass { "ok" } else { "FAIL" }
                );
                all_pass &= report.pass;
            }
            if all_pass {
                println!("check-derivatives: all checks passed");
                Ok(0)
            } else {
                eprintln!("check-derivatives: FAILED");
                Ok(2)
            }
        }
    }
}
