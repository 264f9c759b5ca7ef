//! Variational mixture fit on a three-cluster sample; surplus components
//! are pruned on their own.

use covadapt::mixture::{fit_mixture_variational, VariationalConfig};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> covadapt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clusters = [([0.0, 0.0], 1.0, 600), ([8.0, 1.0], 0.5, 300), ([-3.0, 9.0], 2.0, 100)];
    let mut points = Vec::new();
    for (mean, sd, n) in clusters {
        let noise = Normal::new(0.0, sd).unwrap();
        for _ in 0..n {
            points.push(DVector::from_fn(2, |i, _| mean[i] + noise.sample(&mut rng)));
        }
    }

    let config = VariationalConfig {
        max_components: 6,
        ..Default::default()
    };
    let fit = fit_mixture_variational(&points, &config)?;
    println!("{} components, lower bound {:.2}", fit.model.len(), fit.elbo);
    for (c, n) in fit.model.components().iter().zip(&fit.counts) {
        let cov = c.cov();
        println!(
            "  w {:.3}  n {n:4}  mean ({:6.2}, {:6.2})  var ({:.2}, {:.2})",
            c.weight(),
            c.mean()[0],
            c.mean()[1],
            cov[(0, 0)],
            cov[(1, 1)]
        );
    }
    println!("{} coordinate-ascent runs", fit.elbo_traces.len());
    Ok(())
}
