#![allow(dead_code)]

use std::sync::Arc;

use covadapt::graph::{Factor, FactorGraph, LinearMeasurement, NoiseModel, StateVector, VarId};
use covadapt::mixture::{GaussianComponent, MixtureModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type EpochData = (Vec<(VarId, DVector<f64>)>, Vec<Factor>);

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_points(rng: &mut ChaCha8Rng, n: usize, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let l = cov.clone().cholesky().expect("spd covariance").l();
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(mean.len(), |_, _| normal(rng));
            mean + &l * z
        })
        .collect()
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * floor
}

/// A chain of vector variables tied by odometry, with a few scalar linear
/// observations per epoch.
pub fn random_linear_epochs(seed: u64, epochs: usize, dim: usize) -> Vec<EpochData> {
    let mut rng = rng(seed);
    let mut out = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let id = VarId::new(e, "x");
        let mut factors = Vec::new();
        if e == 0 {
            factors.push(Factor::prior(id.clone(), DVector::zeros(dim), DMatrix::identity(dim, dim)).unwrap());
        } else {
            let delta = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
            let cov = random_spd(&mut rng, dim, 0.2);
            factors.push(Factor::between(VarId::new(e - 1, "x"), id.clone(), delta, cov).unwrap());
        }
        for _ in 0..rng.random_range(0..3) {
            let mut keys = vec![id.clone()];
            let mut coefficients = vec![DMatrix::from_fn(1, dim, |_, _| rng.random_range(-1.0..1.0))];
            if e > 1 && rng.random_bool(0.3) {
                keys.push(VarId::new(rng.random_range(0..e), "x"));
                coefficients.push(DMatrix::from_fn(1, dim, |_, _| rng.random_range(-1.0..1.0)));
            }
            let lin = LinearMeasurement {
                coefficients,
                offset: DVector::from_element(1, rng.random_range(-1.0..1.0)),
            };
            let obs = DVector::from_element(1, rng.random_range(-3.0..3.0));
            let noise = NoiseModel::Adaptive(DMatrix::from_element(1, 1, rng.random_range(0.1..3.0)));
            factors.push(Factor::new(Arc::new(lin), keys, obs, noise).unwrap());
        }
        let init = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
        out.push((vec![(id, init)], factors));
    }
    out
}

pub fn batch_of(epochs: &[EpochData]) -> (FactorGraph, StateVector) {
    let mut graph = FactorGraph::new();
    let mut init = StateVector::new();
    for (vars, factors) in epochs {
        for (id, x) in vars {
            graph.add_variable(id.clone(), x.len()).unwrap();
            init.insert(id.clone(), x.clone()).unwrap();
        }
        for f in factors {
            graph.add_factor(f.clone()).unwrap();
        }
    }
    (graph, init)
}

/// Random mixture with well-conditioned components.
pub fn random_mixture(rng: &mut ChaCha8Rng, d: usize, k: usize, support: u64) -> MixtureModel {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let comps = raw
        .iter()
        .map(|w| {
            let mean = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
            GaussianComponent::new(w / total, mean, random_spd(rng, d, 0.3)).unwrap()
        })
        .collect();
    MixtureModel::new(comps, support).unwrap()
}

/// Pooled first and second moments: the merge oracle.
pub fn pooled_moments(
    a: f64,
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    b: f64,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let mu = (mu_a * a + mu_b * b) / (a + b);
    let second = ((cov_a + mu_a * mu_a.transpose()) * a + (cov_b + mu_b * mu_b.transpose()) * b) / (a + b);
    let cov = second - &mu * mu.transpose();
    (mu, cov)
}
