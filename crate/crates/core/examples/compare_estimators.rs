//! Runs the four estimators on one generated scenario and prints the
//! comparison table. Pass a TOML config path to override the defaults.

use covadapt::bench::{run_benchmark, BenchConfig};

fn main() -> covadapt::Result<()> {
    let config = match std::env::args().nth(1) {
        Some(path) => BenchConfig::load(path.as_ref())?,
        None => BenchConfig::default(),
    };
    config.validate()?;
    let outcome = run_benchmark(&config)?;
    print!("{}", outcome.report.table());
    for s in &outcome.report.estimators {
        if let Some(e) = &s.error {
            eprintln!("{}: {e}", s.kind);
        }
    }
    Ok(())
}
