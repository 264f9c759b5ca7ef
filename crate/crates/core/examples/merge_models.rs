//! Folding a freshly fitted mixture into a running model. The sample below
//! holds points that look like the current model plus a shifted, wider
//! cluster; only the latter should survive as a new component.

use covadapt::adaptation::merge_mixtures;
use covadapt::mixture::{fit_mixture_variational, GaussianComponent, MixtureModel, VariationalConfig};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> covadapt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    let current = MixtureModel::single(GaussianComponent::standard(2), 500)?;

    let mut sample: Vec<DVector<f64>> = (0..400).map(|_| DVector::from_fn(2, |_, _| z())).collect();
    sample.extend((0..300).map(|_| DVector::from_vec(vec![14.0 + 2.0 * z(), 2.0 * z()])));

    let fit = fit_mixture_variational(&sample, &VariationalConfig::default())?;
    let merged = merge_mixtures(&current, &fit.model, &fit.counts, &fit.assignments, &sample, 0.05, 0.05)?;

    for (i, d) in merged.decisions.iter().enumerate() {
        match d.matched {
            Some(g) => println!("new component {i} ({} points) absorbed into {g}", d.count),
            None => println!("new component {i} ({} points) appended", d.count),
        }
        for (g, v) in &d.verdicts {
            println!("    vs {g}: W {:.3} T² {:.2} cov {} mean {}", v.w, v.t_squared, v.cov_equal, v.mean_equal);
        }
    }
    println!("support {} -> {}", current.support_count(), merged.model.support_count());
    for c in merged.model.components() {
        println!("  w {:.3} mean ({:.2}, {:.2})", c.weight(), c.mean()[0], c.mean()[1]);
    }
    Ok(())
}
