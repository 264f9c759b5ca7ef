//! Median horizontal error of each estimator over several seeds and
//! contamination rates.
//!
//! cargo run --release --example seed_sweep -- [seeds] [phi]

use covadapt::bench::{run_benchmark, BenchConfig};
use covadapt::estimators::EstimatorKind;

fn main() -> covadapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let phi: Option<f64> = args.next().and_then(|s| s.parse().ok());
    for eps in [0.0, 0.2, 0.4] {
        println!("epsilon {eps}");
        println!("{:>6}{:>8}{:>8}{:>8}{:>8}{:>9}{:>7}", "seed", "l2", "dcs", "mm", "ice", "ice/l2", "adapt");
        for seed in 1..=seeds {
            let mut config = BenchConfig::default();
            config.scenario.seed = seed;
            config.scenario.contamination.epsilon = eps;
            if let Some(phi) = phi {
                config.estimator.dcs.phi = phi;
            }
            let report = run_benchmark(&config)?.report;
            let med = |k| report.summary(k).and_then(|s| s.stats).map_or(f64::NAN, |s| s.median);
            let ice = report.summary(EstimatorKind::Ice).unwrap();
            println!(
                "{seed:>6}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>9.2}{:>7}",
                med(EstimatorKind::L2),
                med(EstimatorKind::Dcs),
                med(EstimatorKind::Mm),
                med(EstimatorKind::Ice),
                med(EstimatorKind::Ice) / med(EstimatorKind::L2),
                ice.adaptations
            );
        }
    }
    Ok(())
}
