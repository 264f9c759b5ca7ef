//! Benchmark runner: executes estimators on a shared dataset, computes
//! horizontal error statistics and writes the result files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptationSnapshot;
use crate::error::{Error, Result};
use crate::estimators::{run_estimator, EstimatorConfig, EstimatorKind, EstimatorRun, MmConfig};
use crate::sim::{generate_dataset, load_dataset, Dataset, DatasetMetadata, LabeledDataset};

mod config;

pub use config::{parse_estimator_list, BenchConfig};

/// Number of leading position components treated as horizontal.
pub const HORIZONTAL_DIM: usize = 2;

/// Root sum of squares of the component differences.
pub fn rsos_error(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "rsos error",
            expected: truth.len(),
            actual: estimate.len(),
        });
    }
    Ok(estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Config("no errors to summarize".into()));
        }
        if errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("localization error"));
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let std_dev = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            mean,
            median: median(errors),
            std_dev,
            max,
        })
    }
}

/// Middle value; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Horizontal error of each estimated state against ground truth.
pub fn horizontal_errors(trajectory: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<Vec<f64>> {
    if trajectory.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "trajectory length",
            expected: truth.len(),
            actual: trajectory.len(),
        });
    }
    trajectory
        .iter()
        .zip(truth)
        .map(|(x, t)| {
            let h = HORIZONTAL_DIM.min(t.len());
            rsos_error(&x.as_slice()[..h.min(x.len())], &t.as_slice()[..h])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median_us: f64,
    pub mean_us: f64,
    pub max_us: f64,
}

impl TimingStats {
    pub fn from_ns(ns: &[u64]) -> Self {
        let us: Vec<f64> = ns.iter().map(|n| *n as f64 / 1000.0).collect();
        Self {
            median_us: median(&us),
            mean_us: us.iter().sum::<f64>() / us.len() as f64,
            max_us: us.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Deterministic per-estimator summary. Wall times live in `timing.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub kind: EstimatorKind,
    pub stats: Option<ErrorStats>,
    pub error: Option<String>,
    pub epochs: usize,
    pub adaptations: usize,
    pub naive_adaptations: usize,
    pub failed_fits: usize,
    pub relinearizations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub dataset: DatasetMetadata,
    pub epochs: usize,
    pub observations: usize,
    pub mm_model: MmConfig,
    pub config: EstimatorConfig,
    pub estimators: Vec<EstimatorSummary>,
}

impl BenchmarkReport {
    pub fn summary(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.kind == kind)
    }

    pub fn all_succeeded(&self) -> bool {
        self.estimators.iter().all(|s| s.error.is_none())
    }

    /// Fixed-width statistics table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<6}{:>10}{:>10}{:>10}{:>10}{:>8}{:>8}\n",
            "", "mean", "median", "std", "max", "adapt", "naive"
        );
        for e in &self.estimators {
            match (&e.stats, &e.error) {
                (Some(st), _) => {
                    let _ = writeln!(
                        s,
                        "{:<6}{:>10.3}{:>10.3}{:>10.3}{:>10.3}{:>8}{:>8}",
                        e.kind.as_str(),
                        st.mean,
                        st.median,
                        st.std_dev,
                        st.max,
                        e.adaptations,
                        e.naive_adaptations
                    );
                }
                (None, err) => {
                    let _ = writeln!(s, "{:<6}  failed: {}", e.kind.as_str(), err.as_deref().unwrap_or("?"));
                }
            }
        }
        s
    }
}

/// Report plus everything needed to write the output files.
#[derive(Debug)]
pub struct BenchOutcome {
    pub report: BenchmarkReport,
    pub dataset: Dataset,
    pub runs: Vec<Result<EstimatorRun>>,
}

impl BenchOutcome {
    pub fn run(&self, kind: EstimatorKind) -> Option<&EstimatorRun> {
        self.runs.iter().filter_map(|r| r.as_ref().ok()).find(|r| r.kind == kind)
    }
}

/// Loads the configured dataset or generates it.
pub fn prepare_dataset(config: &BenchConfig) -> Result<LabeledDataset> {
    match &config.dataset {
        Some(path) => load_dataset(path),
        None => generate_dataset(&config.scenario),
    }
}

fn summarize(kind: EstimatorKind, run: &Result<EstimatorRun>, dataset: &Dataset) -> EstimatorSummary {
    let mut s = EstimatorSummary {
        kind,
        stats: None,
        error: None,
        epochs: 0,
        adaptations: 0,
        naive_adaptations: 0,
        failed_fits: 0,
        relinearizations: 0,
    };
    match run {
        Err(e) => s.error = Some(e.to_string()),
        Ok(r) => {
            s.epochs = r.trajectory.len();
            s.adaptations = r.adaptations;
            s.naive_adaptations = r.naive_adaptations;
            s.failed_fits = r.failed_fits;
            s.relinearizations = r.relinearizations;
            if !dataset.truth.is_empty() {
                match horizontal_errors(&r.trajectory, &dataset.truth).and_then(|e| ErrorStats::from_errors(&e)) {
                    Ok(st) => s.stats = Some(st),
                    Err(e) => s.error = Some(e.to_string()),
                }
            }
        }
    }
    s
}

/// Runs every configured estimator on one dataset. Estimator failures are
/// recorded in the report rather than returned.
pub fn run_on_dataset(config: &BenchConfig, data: LabeledDataset) -> Result<BenchOutcome> {
    config.validate()?;
    let dataset = data.dataset;
    let runs: Vec<Result<EstimatorRun>> = if config.parallel && config.estimators.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = config
                .estimators
                .iter()
                .map(|&k| {
                    let ds = &dataset;
                    let cfg = &config.estimator;
                    scope.spawn(move || run_estimator(k, ds, cfg))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("estimator thread panicked".into()))))
                .collect()
        })
    } else {
        config
            .estimators
            .iter()
            .map(|&k| run_estimator(k, &dataset, &config.estimator))
            .collect()
    };
    let estimators = config
        .estimators
        .iter()
        .zip(&runs)
        .map(|(k, r)| summarize(*k, r, &dataset))
        .collect();
    let report = BenchmarkReport {
        dataset: dataset.metadata.clone(),
        epochs: dataset.epochs.len(),
        observations: dataset.observation_count(),
        mm_model: config.estimator.mm.clone(),
        config: config.estimator.clone(),
        estimators,
    };
    Ok(BenchOutcome { report, dataset, runs })
}

pub fn run_benchmark(config: &BenchConfig) -> Result<BenchOutcome> {
    run_on_dataset(config, prepare_dataset(config)?)
}

/// Reads the config at `path`, runs it and writes all outputs to its `out`
/// directory.
pub fn run_benchmark_file(path: &Path) -> Result<BenchOutcome> {
    let config = BenchConfig::load(path)?;
    let outcome = run_benchmark(&config)?;
    write_outputs(&outcome, &config.out)?;
    Ok(outcome)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn trajectory_csv(run: &EstimatorRun, dataset: &Dataset) -> Result<String> {
    let p = dataset.position_dim;
    let axes = ["x", "y", "z"];
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["epoch".into()];
    header.extend(axes[..p].iter().map(|a| a.to_string()));
    if dataset.has_clock() {
        header.push("clock_bias".into());
    }
    let with_truth = !dataset.truth.is_empty();
    if with_truth {
        header.extend(axes[..p].iter().map(|a| format!("truth_{a}")));
    }
    w.write_record(&header)?;
    for (i, x) in run.trajectory.iter().enumerate() {
        let mut row = vec![run.epochs[i].to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        if with_truth {
            row.extend(dataset.truth[i].iter().take(p).map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes one JSON file per adaptation event and returns their paths.
pub fn emit_model_snapshots(snapshots: &[AdaptationSnapshot], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    snapshots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = out_dir.join(format!("adaptation_{i:03}_epoch_{}.json", s.epoch));
            write(&path, &serde_json::to_string_pretty(s)?)?;
            Ok(path)
        })
        .collect()
}

/// Writes `report.json`, `stats.csv`, `timing.csv`, one trajectory CSV
/// per successful estimator, ICE per-epoch report lines and snapshots.
pub fn write_outputs(outcome: &BenchOutcome, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("report.json"), &serde_json::to_string_pretty(&outcome.report)?)?;

    let mut stats = csv::Writer::from_writer(Vec::new());
    stats.write_record(["estimator", "mean", "median", "std_dev", "max", "adaptations", "naive_adaptations"])?;
    for s in &outcome.report.estimators {
        let cell = |f: fn(&ErrorStats) -> f64| s.stats.as_ref().map(|st| f(st).to_string()).unwrap_or_default();
        stats.write_record([
            s.kind.as_str().to_string(),
            cell(|st| st.mean),
            cell(|st| st.median),
            cell(|st| st.std_dev),
            cell(|st| st.max),
            s.adaptations.to_string(),
            s.naive_adaptations.to_string(),
        ])?;
    }
    let bytes = stats.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write(&out.join("stats.csv"), &String::from_utf8(bytes).expect("utf-8"))?;

    let mut timing = String::from("estimator,epoch,update_us\n");
    for run in outcome.runs.iter().flatten() {
        for (e, ns) in run.epochs.iter().zip(&run.update_ns) {
            let _ = writeln!(timing, "{},{},{}", run.kind, e, *ns as f64 / 1000.0);
        }
        write(
            &out.join(format!("trajectory_{}.csv", run.kind)),
            &trajectory_csv(run, &outcome.dataset)?,
        )?;
        if !run.reports.is_empty() {
            let mut lines = String::new();
            for r in &run.reports {
                lines.push_str(&serde_json::to_string(r)?);
                lines.push('\n');
            }
            write(&out.join(format!("reports_{}.jsonl", run.kind)), &lines)?;
        }
        if run.kind == EstimatorKind::Ice {
            emit_model_snapshots(&run.snapshots, &out.join("snapshots"))?;
        }
    }
    write(&out.join("timing.csv"), &timing)?;
    Ok(())
}

/// Recomputes horizontal error statistics from a trajectory CSV that
/// carries `truth_*` columns.
pub fn stats_from_trajectory(path: &Path) -> Result<ErrorStats> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let pairs: Vec<(usize, usize)> = ["x", "y"]
        .iter()
        .map(|a| match (col(a), col(&format!("truth_{a}"))) {
            (Some(e), Some(t)) => Ok((e, t)),
            _ => Err(Error::Schema {
                line: 1,
                message: format!("missing column {a} or truth_{a}"),
            }),
        })
        .collect::<Result<_>>()?;
    let mut errors = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Schema {
                    line,
                    message: format!("bad number in column {}", &header[i]),
                })
        };
        let est = pairs.iter().map(|(e, _)| num(*e)).collect::<Result<Vec<_>>>()?;
        let tru = pairs.iter().map(|(_, t)| num(*t)).collect::<Result<Vec<_>>>()?;
        errors.push(rsos_error(&est, &tru)?);
    }
    ErrorStats::from_errors(&errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{ContaminationSpec, ScenarioConfig};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rsos_examples() {
        assert_eq!(rsos_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rsos_error(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(rsos_error(&[1.0], &[1.0, 2.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)];
            let b = [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)];
            assert_relative_eq!(rsos_error(&a, &b).unwrap(), (a[0] - b[0]).hypot(a[1] - b[1]), epsilon = 1e-12);
        }
    }

    #[test]
    fn stats_examples() {
        let s = ErrorStats::from_errors(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.max, 4.0);
        assert_relative_eq!(s.std_dev, 1.25f64.sqrt());
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
        assert!(ErrorStats::from_errors(&[]).is_err());
        assert!(ErrorStats::from_errors(&[f64::NAN]).is_err());
    }

    fn small(eps: f64) -> BenchConfig {
        BenchConfig {
            scenario: ScenarioConfig {
                epochs: 60,
                contamination: ContaminationSpec {
                    epsilon: eps,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn outputs_are_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_benchmark(&small(0.2)).unwrap();
        assert!(outcome.report.all_succeeded());
        write_outputs(&outcome, dir.path()).unwrap();
        for kind in EstimatorKind::ALL {
            let path = dir.path().join(format!("trajectory_{kind}.csv"));
            let recomputed = stats_from_trajectory(&path).unwrap();
            let reported = outcome.report.summary(kind).unwrap().stats.unwrap();
            assert_relative_eq!(recomputed.mean, reported.mean, epsilon = 1e-9);
            assert_relative_eq!(recomputed.median, reported.median, epsilon = 1e-9);
            assert_relative_eq!(recomputed.std_dev, reported.std_dev, epsilon = 1e-9);
            assert_relative_eq!(recomputed.max, reported.max, epsilon = 1e-9);
        }
        assert!(dir.path().join("reports_ice.jsonl").exists());
        let timing = fs::read_to_string(dir.path().join("timing.csv")).unwrap();
        assert_eq!(timing.lines().count(), 1 + 4 * 60);
        let snaps = fs::read_dir(dir.path().join("snapshots")).unwrap().count();
        assert_eq!(snaps, 0);
    }

    #[test]
    fn report_is_deterministic() {
        let a = serde_json::to_string(&run_benchmark(&small(0.2)).unwrap().report).unwrap();
        let b = serde_json::to_string(&run_benchmark(&small(0.2)).unwrap().report).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failures_are_recorded_per_estimator() {
        let mut config = small(0.0);
        config.estimator.dcs.phi = -1.0;
        let outcome = run_benchmark(&config).unwrap();
        assert!(!outcome.report.all_succeeded());
        assert!(outcome.report.summary(EstimatorKind::Dcs).unwrap().error.is_some());
        assert!(outcome.report.summary(EstimatorKind::L2).unwrap().stats.is_some());
        assert!(outcome.report.table().contains("failed"));
    }
}
