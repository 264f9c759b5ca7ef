use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use covadapt::bench::{
    emit_model_snapshots, parse_estimator_list, prepare_dataset, run_on_dataset, stats_from_trajectory, write_outputs,
    BenchConfig,
};
use covadapt::estimators::{run_estimator, EstimatorKind};
use covadapt::sim::save_dataset;
use covadapt::Result;

#[derive(Parser)]
#[command(name = "covadapt-bench", about = "Generate datasets and compare robust estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of l2,dcs,mm,ice.
    #[arg(long)]
    estimators: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as CSV plus a metadata sidecar.
    Generate(Common),
    /// Run the configured estimators and write all reports.
    Run(Common),
    /// Recompute error statistics from trajectory CSVs in a directory.
    Stats {
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Run ICE and dump one JSON file per adaptation event.
    Snapshots(Common),
}

fn load(common: &Common) -> Result<BenchConfig> {
    let mut config = match &common.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    if let Some(seed) = common.seed {
        config.scenario.seed = seed;
    }
    if let Some(list) = &common.estimators {
        config.estimators = parse_estimator_list(list)?;
    }
    Ok(config)
}

fn stats(out: &Path) -> Result<()> {
    println!("{:<6}{:>10}{:>10}{:>10}{:>10}", "", "mean", "median", "std", "max");
    for kind in EstimatorKind::ALL {
        let path = out.join(format!("trajectory_{kind}.csv"));
        if path.exists() {
            let s = stats_from_trajectory(&path)?;
            println!("{:<6}{:>10.3}{:>10.3}{:>10.3}{:>10.3}", kind.as_str(), s.mean, s.median, s.std_dev, s.max);
        }
    }
    Ok(())
}

fn main_inner(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(c) => {
            let config = load(&c)?;
            let data = prepare_dataset(&config)?;
            std::fs::create_dir_all(&config.out).map_err(|e| covadapt::Error::Io {
                path: config.out.clone(),
                source: e,
            })?;
            let path = config.out.join("dataset.csv");
            save_dataset(&data, &path)?;
            println!(
                "wrote {} ({} epochs, {} observations, {} labeled outliers)",
                path.display(),
                data.dataset.epochs.len(),
                data.dataset.observation_count(),
                data.outlier_count()
            );
            Ok(true)
        }
        Command::Run(c) => {
            let config = load(&c)?;
            let outcome = run_on_dataset(&config, prepare_dataset(&config)?)?;
            write_outputs(&outcome, &config.out)?;
            print!("{}", outcome.report.table());
            Ok(outcome.report.all_succeeded())
        }
        Command::Stats { out } => {
            stats(&out)?;
            Ok(true)
        }
        Command::Snapshots(c) => {
            let config = load(&c)?;
            let data = prepare_dataset(&config)?;
            let run = run_estimator(EstimatorKind::Ice, &data.dataset, &config.estimator)?;
            let files = emit_model_snapshots(&run.snapshots, &config.out.join("snapshots"))?;
            println!("{} adaptation snapshots in {}", files.len(), config.out.join("snapshots").display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
