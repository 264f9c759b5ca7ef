//! A stream that turns biased halfway through. ICE collects the rejected
//! ranges, relearns the noise model when the buffer fills and starts
//! explaining the new mode instead of discarding it.

use covadapt::bench::{horizontal_errors, median};
use covadapt::estimators::{run_estimator, EstimatorConfig, EstimatorKind};
use covadapt::sim::{generate_dataset, ContaminationSpec, Regime, ScenarioConfig};

fn main() -> covadapt::Result<()> {
    let scenario = ScenarioConfig {
        epochs: 800,
        seed: 21,
        contamination: ContaminationSpec {
            epsilon: 0.0,
            regimes: vec![Regime {
                start_epoch: 300,
                epsilon: 0.3,
                offset: 15.0,
                k: 4.0,
            }],
            ..Default::default()
        },
        ..Default::default()
    };
    let data = generate_dataset(&scenario)?;
    let mut config = EstimatorConfig::default();
    config.adaptation.buffer_threshold = 300;

    let ice = run_estimator(EstimatorKind::Ice, &data.dataset, &config)?;
    for (snap, report) in ice.snapshots.iter().zip(ice.reports.iter().filter(|r| r.adapted)) {
        println!(
            "epoch {:4}: adapted on {} residuals, {} -> {} components",
            report.epoch,
            report.buffer_size,
            snap.before.len(),
            snap.after.len()
        );
        for c in snap.after.components() {
            println!("    w {:.3} mean {:+.2} var {:.2}", c.weight(), c.mean()[0], c.cov()[(0, 0)]);
        }
    }
    let rejected: usize = ice.reports.iter().map(|r| r.n_outliers).sum();
    println!("{rejected} ranges rejected in total");

    for kind in [EstimatorKind::L2, EstimatorKind::Ice] {
        let run = if kind == EstimatorKind::Ice {
            ice.clone()
        } else {
            run_estimator(kind, &data.dataset, &config)?
        };
        let errors = horizontal_errors(&run.trajectory, &data.dataset.truth)?;
        let late = median(&errors[300..]);
        println!("{kind}: median error after the switch {late:.3}");
    }
    Ok(())
}
