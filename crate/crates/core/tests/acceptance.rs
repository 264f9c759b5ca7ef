//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use covadapt::adaptation::{covariance_equivalent, mean_equivalent, merge_component, merge_mixtures};
use covadapt::adaptation::equivalence::{sample_covariance, sample_mean};
use covadapt::bench::{run_benchmark, BenchConfig};
use covadapt::estimators::{run_estimator, EstimatorConfig, EstimatorKind};
use covadapt::graph::{solve_batch, solve_incremental, BatchConfig, IncrementalConfig, IncrementalSession};
use covadapt::mixture::{fit_mixture_variational, GaussianComponent, MixtureModel, VariationalConfig};
use covadapt::sim::generate_dataset;
use covadapt::solver::qr_factorize;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use common::*;

const INCREMENTAL_TOL: f64 = 1e-8;
const PYTHAGORAS_TOL: f64 = 1e-9;
const RECOVERY_MEAN_TOL: f64 = 0.3;
const ALPHA: f64 = 0.05;
const CALIBRATION_TOL: f64 = 0.03;
const MIN_POWER: f64 = 0.99;
const WEIGHT_SUM_TOL: f64 = 1e-9;
const POOLING_TOL: f64 = 1e-9;
const ROBUST_RATIO: f64 = 0.5;
const CLEAN_SPREAD: f64 = 0.05;
const GATED_FRACTION: f64 = 0.2;
const MAX_MEDIAN_UPDATE_MS: f64 = 40.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn incremental_vs_batch() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = rng(100);
    for case in 0..100 {
        let epochs = rng.random_range(1..=50);
        let dim = rng.random_range(1..=3);
        let data = random_linear_epochs(1000 + case, epochs, dim);
        let mut session = IncrementalSession::new(IncrementalConfig::default());
        for (vars, factors) in data.clone() {
            solve_incremental(&mut session, vars, factors).unwrap();
        }
        let (graph, init) = batch_of(&data);
        let batch = solve_batch(&graph, &init, &BatchConfig::default()).unwrap();
        worst = worst.max((session.estimate().to_flat() - batch.to_flat()).amax());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < INCREMENTAL_TOL && secs < 10.0,
        format!("100 graphs, max diff {worst:.2e}, {secs:.2} s"),
    )
}

fn pythagoras() -> Outcome {
    let mut rng = rng(200);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=8);
        let n = m + rng.random_range(0..=10);
        let a = DMatrix::from_fn(n, m, |_, _| rng.random_range(-2.0..2.0));
        let b = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let x = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        let sys = qr_factorize(&a, &b).unwrap();
        let lhs = (&a * &x - &b).norm_squared();
        let rhs = sys.reduced_cost(&x) + sys.residual_norm_sq();
        worst = worst.max((lhs - rhs).abs() / lhs.max(1.0));
    }
    outcome(worst < PYTHAGORAS_TOL, format!("1000 systems, max relative gap {worst:.2e}"))
}

fn variational_recovery() -> Outcome {
    let start = Instant::now();
    let mut ok = 0;
    for trial in 0..100u64 {
        let mut rng = rng(300 + trial);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let sigma = rng.random_range(0.5..2.0);
        let sep = 10.0 * sigma;
        let a = DVector::from_vec(vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]);
        let b = &a + DVector::from_vec(vec![sep * angle.cos(), sep * angle.sin()]);
        let cov = DMatrix::identity(2, 2) * sigma * sigma;
        let mut pts = gaussian_points(&mut rng, 1000, &a, &cov);
        pts.extend(gaussian_points(&mut rng, 1000, &b, &cov));
        let config = VariationalConfig {
            seed: trial,
            ..Default::default()
        };
        let Ok(fit) = fit_mixture_variational(&pts, &config) else { continue };
        if fit.model.len() != 2 {
            continue;
        }
        let close = [&a, &b].iter().all(|t| {
            fit.model
                .components()
                .iter()
                .any(|c| (c.mean() - *t).norm() < RECOVERY_MEAN_TOL)
        });
        ok += usize::from(close);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(ok >= 95 && secs < 30.0, format!("{ok}/100 trials recovered, {secs:.2} s"))
}

fn rejection_rate(trials: usize, mut reject: impl FnMut(usize) -> bool) -> f64 {
    (0..trials).filter(|&t| reject(t)).count() as f64 / trials as f64
}

fn calibration() -> Outcome {
    let m = 2000;
    let d = 2;
    let eye = DMatrix::identity(d, d);
    let zero = DVector::zeros(d);
    let mut rng = rng(400);
    let cov_null = rejection_rate(500, |_| {
        let y = gaussian_points(&mut rng, m, &zero, &eye);
        !covariance_equivalent(&y, ALPHA).unwrap().1
    });
    let mean_test = |y: &[DVector<f64>]| {
        let mu = sample_mean(y);
        let cov = sample_covariance(y, 1);
        !mean_equivalent(&mu, &zero, &cov, y.len(), ALPHA).unwrap().1
    };
    let mean_null = rejection_rate(500, |_| mean_test(&gaussian_points(&mut rng, m, &zero, &eye)));
    let cov_power = rejection_rate(500, |_| {
        let y = gaussian_points(&mut rng, m, &zero, &(&eye * 4.0));
        !covariance_equivalent(&y, ALPHA).unwrap().1
    });
    let shifted = DVector::from_vec(vec![1.0, 0.0]);
    let mean_power = rejection_rate(500, |_| mean_test(&gaussian_points(&mut rng, m, &shifted, &eye)));
    let calibrated = (cov_null - ALPHA).abs() <= CALIBRATION_TOL && (mean_null - ALPHA).abs() <= CALIBRATION_TOL;
    outcome(
        calibrated && cov_power > MIN_POWER && mean_power > MIN_POWER,
        format!(
            "null rejection cov {cov_null:.3} mean {mean_null:.3}; power cov {cov_power:.3} mean {mean_power:.3}"
        ),
    )
}

fn merge_bookkeeping() -> Outcome {
    let mut rng = rng(500);
    let mut worst_sum = 0.0f64;
    let mut support_ok = true;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=3);
        let big_n = rng.random_range(1..=5000u64);
        let k_g = rng.random_range(1..=4);
        let gmm_g = random_mixture(&mut rng, d, k_g, big_n);
        let k = rng.random_range(1..=3);
        let centers = random_mixture(&mut rng, d, k, 1);
        let mut residuals = Vec::new();
        let mut assignments = Vec::new();
        for (j, c) in centers.components().iter().enumerate() {
            let n = rng.random_range(1..=150);
            residuals.extend(gaussian_points(&mut rng, n, c.mean(), c.cov()));
            assignments.extend(std::iter::repeat_n(j, n));
        }
        let big_m = residuals.len();
        let mut counts = vec![0usize; k];
        let mut comps = Vec::with_capacity(k);
        for j in 0..k {
            let members: Vec<_> = residuals
                .iter()
                .zip(&assignments)
                .filter(|(_, a)| **a == j)
                .map(|(r, _)| r.clone())
                .collect();
            counts[j] = members.len();
            let cov = sample_covariance(&members, 0) + DMatrix::identity(d, d) * 0.05;
            comps.push(GaussianComponent::new(counts[j] as f64 / big_m as f64, sample_mean(&members), cov).unwrap());
        }
        let gmm_n = MixtureModel::new(comps, big_m as u64).unwrap();
        let merged = merge_mixtures(&gmm_g, &gmm_n, &counts, &assignments, &residuals, ALPHA, ALPHA).unwrap();
        worst_sum = worst_sum.max((merged.model.weight_sum() - 1.0).abs());
        support_ok &= merged.model.support_count() == big_n + big_m as u64;
    }

    let mut worst_pool = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=4);
        let mu_g = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let mu_n = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let w = rng.random_range(0.05..1.0);
        let g_g = GaussianComponent::new(w, mu_g.clone(), random_spd(&mut rng, d, 0.2)).unwrap();
        let g_n = GaussianComponent::new(0.5, mu_n.clone(), random_spd(&mut rng, d, 0.2)).unwrap();
        let n = rng.random_range(10.0..5000.0f64).round();
        let big_m = rng.random_range(10.0..2000.0f64).round();
        let m = (big_m * rng.random_range(0.05..1.0f64)).round().max(1.0);
        let out = merge_component(&g_g, &g_n, n, m, big_m).unwrap();
        let (mu, cov) = pooled_moments(n * w, &mu_g, g_g.cov(), m, &mu_n, g_n.cov());
        let weight = (n * w + m) / (n + big_m);
        worst_pool = worst_pool
            .max((out.mean() - mu).amax())
            .max((out.cov() - cov).amax())
            .max((out.weight() - weight).abs());
    }
    outcome(
        worst_sum <= WEIGHT_SUM_TOL && support_ok && worst_pool < POOLING_TOL,
        format!(
            "10000 merges, max |Σw − 1| {worst_sum:.1e}, support exact: {support_ok}; pooling oracle max diff {worst_pool:.1e}"
        ),
    )
}

fn default_config(seed: u64, epsilon: f64) -> BenchConfig {
    let mut c = BenchConfig::default();
    c.scenario.seed = seed;
    c.scenario.contamination.epsilon = epsilon;
    c
}

fn median_of(kind: EstimatorKind, data: &covadapt::sim::Dataset, config: &EstimatorConfig) -> f64 {
    let run = run_estimator(kind, data, config).unwrap();
    let errors = covadapt::bench::horizontal_errors(&run.trajectory, &data.truth).unwrap();
    covadapt::bench::median(&errors)
}

fn robustness() -> Outcome {
    let mut wins = 0;
    let mut ratios = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 1..=10 {
        let start = Instant::now();
        let config = default_config(seed, 0.2);
        let data = generate_dataset(&config.scenario).unwrap().dataset;
        let l2 = median_of(EstimatorKind::L2, &data, &config.estimator);
        let ice = median_of(EstimatorKind::Ice, &data, &config.estimator);
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let r = ice / l2;
        ratios.push(format!("{r:.2}"));
        wins += usize::from(r <= ROBUST_RATIO);
    }
    outcome(
        wins >= 8 && slowest < 60.0,
        format!("ICE/L2 median ratio per seed [{}], {wins}/10 at most {ROBUST_RATIO}, slowest seed {slowest:.1} s", ratios.join(" ")),
    )
}

fn clean_agreement() -> Outcome {
    let report = run_benchmark(&default_config(1, 0.0)).unwrap().report;
    let medians: Vec<(EstimatorKind, f64)> = report
        .estimators
        .iter()
        .map(|s| (s.kind, s.stats.map_or(f64::NAN, |st| st.median)))
        .collect();
    let lo = medians.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let hi = medians.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let spread = hi / lo - 1.0;
    let listed: Vec<String> = medians.iter().map(|(k, m)| format!("{k} {m:.3}")).collect();
    outcome(
        spread <= CLEAN_SPREAD,
        format!("medians {}, spread {:.1}%", listed.join(", "), 100.0 * spread),
    )
}

fn adaptation_efficiency() -> Outcome {
    let run = |eps: f64| {
        let mut c = default_config(1, eps);
        c.estimator.adaptation.buffer_threshold = 250;
        let data = generate_dataset(&c.scenario).unwrap().dataset;
        run_estimator(EstimatorKind::Ice, &data, &c.estimator).unwrap()
    };
    let contaminated = run(0.05);
    let clean = run(0.0);
    let gated = contaminated.adaptations;
    let naive = contaminated.naive_adaptations;
    outcome(
        naive > 0 && gated as f64 <= GATED_FRACTION * naive as f64 && clean.adaptations == 0,
        format!(
            "epsilon 0.05: {gated} gated vs {naive} naive; epsilon 0: {} adaptations",
            clean.adaptations
        ),
    )
}

fn throughput() -> Outcome {
    let config = BenchConfig {
        parallel: false,
        ..default_config(1, 0.2)
    };
    let outcome_ = run_benchmark(&config).unwrap();
    let median_ms = |k| {
        let r = outcome_.run(k).unwrap();
        let ms: Vec<f64> = r.update_ns.iter().map(|n| *n as f64 / 1e6).collect();
        covadapt::bench::median(&ms)
    };
    let ice = median_ms(EstimatorKind::Ice);
    let others: Vec<(EstimatorKind, f64)> = [EstimatorKind::L2, EstimatorKind::Dcs, EstimatorKind::Mm]
        .into_iter()
        .map(|k| (k, median_ms(k)))
        .collect();
    let listed: Vec<String> = others.iter().map(|(k, m)| format!("{k} {m:.3}")).collect();
    outcome(
        ice < MAX_MEDIAN_UPDATE_MS && others.iter().all(|(_, m)| *m <= ice),
        format!("median update ms: ice {ice:.3}, {}", listed.join(", ")),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}"));
        let config = default_config(3, 0.2);
        let result = run_benchmark(&config).unwrap();
        covadapt::bench::write_outputs(&result, &out).unwrap();
        bytes.push(std::fs::read(out.join("report.json")).unwrap());
    }
    outcome(bytes[0] == bytes[1], format!("report.json sizes {} and {} bytes", bytes[0].len(), bytes[1].len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("incremental matches batch", incremental_vs_batch),
        ("QR Pythagoras split", pythagoras),
        ("variational fit recovery", variational_recovery),
        ("equivalence test calibration and power", calibration),
        ("merge bookkeeping", merge_bookkeeping),
        ("robustness at epsilon 0.2", robustness),
        ("clean-data agreement", clean_agreement),
        ("adaptation gating", adaptation_efficiency),
        ("update throughput", throughput),
        ("report determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
