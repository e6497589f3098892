//! Acceptance gate: one test per criterion, each printing a single
//! `criterion N ... PASS/FAIL` line. Run with `cargo test --test acceptance`
//! (add `-- --nocapture` to see the lines for passing criteria too).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use advreg::attack::{attack_instance, build_attacked_testset, AttackSpec};
use advreg::baselines::fit_linreg;
use advreg::calculus::derivative_check_suite;
use advreg::data::{feature_movement, make_training_split, split, LabelScaler, Normalizer};
use advreg::experiment::{run_sweep_on, write_report, ExperimentConfig};
use advreg::model::{AdversaryBlock, Dataset, Weights};
use advreg::solver::{default_start, solve, SolverConfig};
use advreg::stationarity::{kkt_report, BlockVariable};
use advreg::synthetic::{consistent_toy_problem, real_estate_like, wine_quality_like};
use advreg::{BilevelProblem, SolveStatus};

fn report(criterion: u32, name: &str, pass: bool, details: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} ({name}): {verdict} — {details}");
    assert!(pass, "criterion {criterion} ({name}) failed: {details}");
}

/// Criterion 1: analytic derivatives agree with central finite differences on
/// 100 seeded random instances, within 1e-5 relative error, in under 10s.
#[test]
fn criterion_1_derivative_correctness() {
    let start = Instant::now();
    let checks = derivative_check_suite(100, 7).expect("derivative suite runs");
    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0f64, f64::max);
    let all_pass = checks.iter().all(|c| c.pass);
    let in_time = elapsed.as_secs_f64() < 10.0;
    report(
        1,
        "derivative correctness",
        all_pass && in_time,
        &format!(
            "{} derivative families over 100 instances, worst relative error {worst:.2e}, {:.2}s",
            checks.len(),
            elapsed.as_secs_f64()
        ),
    );
}

/// Criterion 2: on 25 toy problems with a known stationary point, the solver
/// started nearby converges to a point satisfying stationarity, feasibility,
/// non-negativity, and complementarity.
#[test]
fn criterion_2_stationarity_fidelity() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..25u64 {
        let q = 2 + (seed as usize % 3);
        let m = 1 + (seed as usize % 2);
        let n = 3 + (seed as usize % 4);
        let (problem, point) = consistent_toy_problem(q, m, n, seed);
        let mut z = point.to_flat();
        for v in z.iter_mut() {
            *v += 1e-3 * rng.random_range(-1.0..1.0);
        }
        let start = BlockVariable::from_flat(&z, problem.layout()).unwrap();
        let outcome = solve(&problem, &start, &SolverConfig::default()).unwrap();
        let kkt = kkt_report(&problem, &outcome.point).unwrap();
        let ok = outcome.status == SolveStatus::Converged && kkt.satisfied(1e-5, 1e-8);
        if !ok {
            failures.push(format!(
                "seed {seed}: status {:?}, stationarity {:.2e}, constraint {:.2e}, \
                 multiplier {:.2e}, complementarity {:.2e}",
                outcome.status,
                kkt.stationarity_inf,
                kkt.max_constraint,
                kkt.min_multiplier,
                kkt.max_complementarity
            ));
        }
    }
    report(
        2,
        "stationarity fidelity",
        failures.is_empty(),
        &if failures.is_empty() {
            "25/25 toy problems converged to verified stationary points".to_string()
        } else {
            failures.join("; ")
        },
    );
}

/// Criterion 3: on 50 random two-feature instances and thresholds
/// {0.85, 0.9, 0.95, 1.0}, the attack is within 1e-3 of a 400x400 polar grid
/// oracle, in under 30s total.
#[test]
fn criterion_3_attack_optimality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut checked = 0usize;
    for _ in 0..50 {
        let w = Weights(DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)));
        let x0 = DVector::from_fn(2, |_, _| rng.random_range(0.2..1.0));
        let target: f64 = rng.random_range(0.0..1.5);
        for &delta in &[0.85, 0.90, 0.95, 1.0] {
            let attacked = attack_instance(&w, &x0, target, delta).unwrap();
            let achieved = (w.0.dot(&attacked) - target).powi(2);

            let radius_max = 5.0 * (x0.norm() + target.abs() / w.0.norm().max(1e-6));
            let mut oracle = (w.0.dot(&x0) - target).powi(2);
            for ri in 1..=400 {
                let r = radius_max * ri as f64 / 400.0;
                for ti in 0..400 {
                    let theta = 2.0 * std::f64::consts::PI * ti as f64 / 400.0;
                    let cand = DVector::from_row_slice(&[r * theta.cos(), r * theta.sin()]);
                    if cand.dot(&x0) / (cand.norm() * x0.norm()) >= delta - 1e-9 {
                        oracle = oracle.min((w.0.dot(&cand) - target).powi(2));
                    }
                }
            }
            worst_gap = worst_gap.max(achieved - oracle);
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_gap <= 1e-3 && elapsed.as_secs_f64() < 30.0;
    report(
        3,
        "attack optimality",
        pass,
        &format!(
            "{checked} instance/threshold pairs, worst gap to grid oracle {worst_gap:.2e}, \
             {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Criterion 4: at a constructed stationary point the solver stops after zero
/// iterations; from a 1e-2 perturbation it reconverges to residual <= 1e-6.
#[test]
fn criterion_4_stationary_point_recovery() {
    let mut failures = Vec::new();
    for seed in [0u64, 1, 2, 3, 4] {
        let (problem, point) = consistent_toy_problem(3, 2, 5, seed);
        let at_point = solve(&problem, &point, &SolverConfig::default()).unwrap();
        if at_point.status != SolveStatus::Converged || !at_point.trace.is_empty() {
            failures.push(format!(
                "seed {seed}: {} iterations at the stationary point",
                at_point.trace.len()
            ));
            continue;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let mut z = point.to_flat();
        for v in z.iter_mut() {
            *v += 1e-2 * rng.random_range(-1.0..1.0);
        }
        let start = BlockVariable::from_flat(&z, problem.layout()).unwrap();
        let recovered = solve(&problem, &start, &SolverConfig::default()).unwrap();
        if recovered.status != SolveStatus::Converged || recovered.residual_norm > 1e-6 {
            failures.push(format!(
                "seed {seed}: reconverge status {:?}, residual {:.2e}",
                recovered.status, recovered.residual_norm
            ));
        }
    }
    report(
        4,
        "stationary point recovery",
        failures.is_empty(),
        &if failures.is_empty() {
            "5/5 seeds: zero-iteration stop and reconvergence from 1e-2 perturbation".to_string()
        } else {
            failures.join("; ")
        },
    );
}

fn desk_scale_config() -> ExperimentConfig {
    ExperimentConfig {
        delta_grid: vec![0.95],
        ..ExperimentConfig::default()
    }
}

/// Criterion 5: on both bundled datasets, for at least 4 of 5 seeds the best
/// bilevel model over the block-size grid beats plain ridge regression on the
/// attacked test set at threshold 0.95; the per-seed minimizer over the block
/// size sits at a small or interior grid point (never the grid maximum) in at
/// least 4 of 5 seeds; all in under 30 minutes.
#[test]
fn criterion_5_desk_scale_reproduction() {
    let start = Instant::now();
    let config = desk_scale_config();
    let mut summaries = Vec::new();
    let mut pass = true;

    for (name, data) in [
        ("real_estate", real_estate_like().to_dataset()),
        ("wine_quality", wine_quality_like().to_dataset()),
    ] {
        let sweep = run_sweep_on(&data, name, &config).unwrap();
        let grid_max = config.m_grid.iter().copied().max().unwrap();
        let mut wins = 0usize;
        let mut inner = 0usize;
        let mut best_ms = Vec::new();
        for &seed in &config.seeds {
            let cells: Vec<_> = sweep
                .cells
                .iter()
                .filter(|c| c.seed == seed && c.error.is_none())
                .collect();
            let best_cell = cells
                .iter()
                .min_by(|a, b| a.bilevel_mse_attacked.total_cmp(&b.bilevel_mse_attacked))
                .expect("each seed produces cells");
            let linreg = cells
                .first()
                .map(|c| c.linreg_mse_attacked)
                .unwrap_or(f64::NAN);
            if best_cell.bilevel_mse_attacked < linreg {
                wins += 1;
            }
            if best_cell.m < grid_max {
                inner += 1;
            }
            best_ms.push(best_cell.m);
        }
        if wins < 4 || inner < 4 {
            pass = false;
        }
        summaries.push(format!(
            "{name}: bilevel beats ridge in {wins}/5 seeds, minimizer m {best_ms:?} interior/small in {inner}/5"
        ));
    }

    let elapsed = start.elapsed();
    if elapsed.as_secs_f64() >= 1800.0 {
        pass = false;
    }
    summaries.push(format!("{:.0}s total", elapsed.as_secs_f64()));
    report(5, "desk-scale reproduction", pass, &summaries.join("; "));
}

/// Criterion 6: every attacked row in the harness-built test sets satisfies
/// its similarity threshold and never increases the adversary's loss.
#[test]
fn criterion_6_attack_validity() {
    let mut total = 0usize;
    let mut valid = 0usize;
    for data in [real_estate_like().to_dataset(), wine_quality_like().to_dataset()] {
        for seed in [0u64, 1] {
            let (train_raw, test_raw) = split(&data, 0.8, seed).unwrap();
            let normalizer = Normalizer::fit(&train_raw);
            let labels = LabelScaler::fit(&train_raw);
            let train = labels.transform(&normalizer.transform(&train_raw).unwrap());
            let test = labels.transform(&normalizer.transform(&test_raw).unwrap());
            let w = fit_linreg(&train, Some(100.0)).unwrap();
            let spec = AttackSpec { seed, ..AttackSpec::default() };
            let attacked = build_attacked_testset(&test, &w, &spec).unwrap();
            assert!(!attacked.records.is_empty());
            for record in &attacked.records {
                total += 1;
                if record.achieved_similarity >= record.threshold - 1e-8
                    && record.loss_after <= record.loss_before + 1e-12
                {
                    valid += 1;
                }
            }
        }
    }
    report(
        6,
        "attack validity",
        total > 0 && valid == total,
        &format!("{valid}/{total} attacked rows feasible and non-regressing"),
    );
}

/// Criterion 7: two identical sweep runs produce byte-identical report files.
#[test]
fn criterion_7_determinism() {
    let data = real_estate_like().to_dataset();
    let config = ExperimentConfig {
        m_grid: vec![1, 3],
        delta_grid: vec![0.95],
        seeds: vec![0, 1],
        ..ExperimentConfig::default()
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (json_a, csv_a) =
        write_report(&run_sweep_on(&data, "real_estate", &config).unwrap(), dir_a.path()).unwrap();
    let (json_b, csv_b) =
        write_report(&run_sweep_on(&data, "real_estate", &config).unwrap(), dir_b.path()).unwrap();
    let json_equal = std::fs::read(&json_a).unwrap() == std::fs::read(&json_b).unwrap();
    let csv_equal = std::fs::read(&csv_a).unwrap() == std::fs::read(&csv_b).unwrap();
    report(
        7,
        "determinism",
        json_equal && csv_equal,
        &format!("JSON identical: {json_equal}, CSV identical: {csv_equal}"),
    );
}

/// Criterion 8: feature-movement reports are entrywise non-negative, and an
/// adversary that never moves yields the all-zero vector.
#[test]
fn criterion_8_feature_movement() {
    // Degenerate case: adversary at its origin.
    let origin = DMatrix::from_row_slice(2, 3, &[0.2, 0.4, 0.6, 0.5, 0.1, 0.9]);
    let still = AdversaryBlock::new(origin, DVector::from_row_slice(&[1.0, 2.0]), 0.0).unwrap();
    let zero = feature_movement(&still);
    let degenerate_ok = zero.iter().all(|v| *v == 0.0);

    // Solved case on a small real split.
    let data = real_estate_like().to_dataset();
    let (train_raw, _) = split(&data, 0.8, 0).unwrap();
    let normalizer = Normalizer::fit(&train_raw);
    let train = LabelScaler::fit(&train_raw).transform(&normalizer.transform(&train_raw).unwrap());
    let (static_data, adversary) = make_training_split(&train, 3, 0.1, 0).unwrap();
    let problem = BilevelProblem::new(
        static_data,
        adversary.clone(),
        advreg::ModelConfig { delta: 0.95, ridge: Some(100.0), nu: 0.1 },
    )
    .unwrap();
    let outcome = solve(
        &problem,
        &default_start(&problem).unwrap(),
        &SolverConfig::default(),
    )
    .unwrap();
    let solved = adversary.with_current(outcome.point.x_matrix()).unwrap();
    let movement = feature_movement(&solved);
    let nonnegative = movement.iter().all(|v| *v >= 0.0 && v.is_finite());

    report(
        8,
        "feature movement",
        degenerate_ok && nonnegative,
        &format!(
            "degenerate zero vector: {degenerate_ok}; solved movement in \
             [{:.2e}, {:.2e}]",
            movement.min(),
            movement.max()
        ),
    );
}
