//! Folding a freshly fitted mixture into the running model.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::equivalence::{test_against, EquivalenceVerdict};
use crate::error::{Error, Result};
use crate::mixture::{floor_eigenvalues, symmetrize, GaussianComponent, MixtureModel};

const SPD_FLOOR: f64 = 1e-12;

// Pooled moments of two groups summarized by (count, mean, covariance).
fn pool(
    ca: f64,
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    cb: f64,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let total = ca + cb;
    if !(total > 0.0) {
        return Err(Error::CountMismatch(format!("pooled count {total} must be positive")));
    }
    let mu = (mu_a * ca + mu_b * cb) / total;
    let second = (cov_a * ca + cov_b * cb) / total
        + (mu_a * mu_a.transpose() * ca + mu_b * mu_b.transpose() * cb) / total;
    let cov = symmetrize(&(second - &mu * mu.transpose()));
    let scale = cov.diagonal().amax().max(1.0);
    Ok((mu, floor_eigenvalues(&cov, SPD_FLOOR * scale)))
}

/// Merges `g_n` (supported by `m` of the `M` new points) into `g_g` (from a
/// model supporting `N` points): moments pooled with counts `N·w_g` and
/// `m`, weight `(N·w_g + m)/(N + M)`.
pub fn merge_component(
    g_g: &GaussianComponent,
    g_n: &GaussianComponent,
    n: f64,
    m: f64,
    big_m: f64,
) -> Result<GaussianComponent> {
    if g_g.dim() != g_n.dim() {
        return Err(Error::DimensionMismatch {
            context: "merged components",
            expected: g_g.dim(),
            actual: g_n.dim(),
        });
    }
    let ca = n * g_g.weight();
    let (mu, cov) = pool(ca, g_g.mean(), g_g.cov(), m, g_n.mean(), g_n.cov())?;
    GaussianComponent::new((ca + m) / (n + big_m), mu, cov)
}

/// What happened to one new component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentDecision {
    pub count: usize,
    /// Index of the prior component it was merged into; `None` if appended
    /// (or dropped when it has no support).
    pub matched: Option<usize>,
    /// Verdicts of every candidate tried, in the order tried.
    pub verdicts: Vec<(usize, EquivalenceVerdict)>,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub model: MixtureModel,
    pub decisions: Vec<ComponentDecision>,
}

/// Merges `gmm_n` into `gmm_g`.
///
/// `residuals` are the points `gmm_n` was fitted on, `assignments` their
/// component indices and `counts` the per-component totals. Each new
/// component is tested against the prior components in descending weight
/// order; the first that passes both equivalence tests absorbs it.
/// Unmatched components are appended. Weights come from one count ledger
/// (`N·w_g` per prior component, plus absorbed or appended counts) divided
/// by `N + M`, so they sum to one.
pub fn merge_mixtures(
    gmm_g: &MixtureModel,
    gmm_n: &MixtureModel,
    counts: &[usize],
    assignments: &[usize],
    residuals: &[DVector<f64>],
    alpha_cov: f64,
    alpha_mean: f64,
) -> Result<MergeOutcome> {
    let d = gmm_g.dim();
    if gmm_n.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "merged mixtures",
            expected: d,
            actual: gmm_n.dim(),
        });
    }
    if counts.len() != gmm_n.len() {
        return Err(Error::CountMismatch(format!(
            "{} counts for {} components",
            counts.len(),
            gmm_n.len()
        )));
    }
    let big_m: usize = counts.iter().sum();
    if big_m as u64 != gmm_n.support_count() {
        return Err(Error::CountMismatch(format!(
            "counts sum to {big_m}, support count is {}",
            gmm_n.support_count()
        )));
    }
    if assignments.len() != residuals.len() || residuals.len() != big_m {
        return Err(Error::CountMismatch(format!(
            "{} assignments and {} residuals for {big_m} points",
            assignments.len(),
            residuals.len()
        )));
    }
    let mut members: Vec<Vec<DVector<f64>>> = vec![Vec::new(); counts.len()];
    for (r, &a) in residuals.iter().zip(assignments) {
        let slot = members
            .get_mut(a)
            .ok_or_else(|| Error::CountMismatch(format!("assignment {a} out of range")))?;
        slot.push(r.clone());
    }
    for (k, (mem, &c)) in members.iter().zip(counts).enumerate() {
        if mem.len() != c {
            return Err(Error::CountMismatch(format!(
                "component {k}: {} assigned points, count {c}",
                mem.len()
            )));
        }
    }

    let n = gmm_g.support_count() as f64;
    let mut ledger: Vec<(f64, DVector<f64>, DMatrix<f64>)> = gmm_g
        .components()
        .iter()
        .map(|c| (n * c.weight(), c.mean().clone(), c.cov().clone()))
        .collect();
    let mut order: Vec<usize> = (0..gmm_g.len()).collect();
    order.sort_by(|a, b| {
        gmm_g.components()[*b]
            .weight()
            .total_cmp(&gmm_g.components()[*a].weight())
            .then(a.cmp(b))
    });

    let mut appended = Vec::new();
    let mut decisions = Vec::with_capacity(counts.len());
    for (k, comp) in gmm_n.components().iter().enumerate() {
        let m = counts[k];
        let mut decision = ComponentDecision {
            count: m,
            matched: None,
            verdicts: Vec::new(),
        };
        if m == 0 {
            decisions.push(decision);
            continue;
        }
        if m > d {
            for &j in &order {
                let verdict = test_against(&members[k], &gmm_g.components()[j], alpha_cov, alpha_mean)?;
                decision.verdicts.push((j, verdict));
                if verdict.equivalent() {
                    decision.matched = Some(j);
                    break;
                }
            }
        }
        match decision.matched {
            Some(j) => {
                let (c, mu, cov) = &ledger[j];
                let (mu, cov) = pool(*c, mu, cov, m as f64, comp.mean(), comp.cov())?;
                ledger[j] = (c + m as f64, mu, cov);
            }
            None => appended.push((m as f64, comp.mean().clone(), comp.cov().clone())),
        }
        decisions.push(decision);
    }

    let total = n + big_m as f64;
    let components = ledger
        .into_iter()
        .chain(appended)
        .filter(|(c, _, _)| *c > 0.0)
        .map(|(c, mu, cov)| GaussianComponent::new(c / total, mu, cov))
        .collect::<Result<Vec<_>>>()?;
    if components.is_empty() {
        return Err(Error::EmptyModel);
    }
    let model = MixtureModel::new(components, gmm_g.support_count() + big_m as u64)?;
    Ok(MergeOutcome { model, decisions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::equivalence::{sample_covariance, sample_mean};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn draw(rng: &mut ChaCha8Rng, m: usize, mu: &DVector<f64>, l: &DMatrix<f64>) -> Vec<DVector<f64>> {
        (0..m)
            .map(|_| mu + l * DVector::from_fn(mu.len(), |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn identical_components_are_unchanged() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let g = GaussianComponent::new(0.5, v(&[1.0, -2.0]), cov.clone()).unwrap();
        let merged = merge_component(&g, &g, 100.0, 50.0, 100.0).unwrap();
        assert_relative_eq!(merged.mean(), g.mean(), epsilon = 1e-12);
        assert_relative_eq!(merged.cov(), &cov, epsilon = 1e-12);
    }

    #[test]
    fn weight_arithmetic() {
        let g = GaussianComponent::new(0.5, v(&[0.0]), DMatrix::identity(1, 1)).unwrap();
        let h = GaussianComponent::new(1.0, v(&[0.1]), DMatrix::identity(1, 1)).unwrap();
        let merged = merge_component(&g, &h, 100.0, 50.0, 50.0).unwrap();
        assert_relative_eq!(merged.weight(), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn merge_matches_moment_pooling_of_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let d = rng.random_range(1..4);
            let mu_a = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let mu_b = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let a = draw(&mut rng, 70, &mu_a, &DMatrix::identity(d, d));
            let b = draw(&mut rng, 30, &mu_b, &(DMatrix::identity(d, d) * 2.0));
            let ga = GaussianComponent::new(0.7, sample_mean(&a), sample_covariance(&a, 0)).unwrap();
            let gb = GaussianComponent::new(1.0, sample_mean(&b), sample_covariance(&b, 0)).unwrap();
            let merged = merge_component(&ga, &gb, 100.0, 30.0, 30.0).unwrap();
            let union: Vec<_> = a.iter().chain(&b).cloned().collect();
            assert_relative_eq!(merged.mean(), &sample_mean(&union), epsilon = 1e-9);
            assert_relative_eq!(merged.cov(), &sample_covariance(&union, 0), epsilon = 1e-9);
        }
    }

    #[test]
    fn merge_is_weight_symmetric() {
        let a = GaussianComponent::new(0.5, v(&[1.0, 2.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 3.0])).unwrap();
        let b = GaussianComponent::new(1.0, v(&[-1.0, 0.5]), DMatrix::identity(2, 2) * 0.5).unwrap();
        // N·w_g = 40 and m = 40 on both sides
        let ab = merge_component(&a, &b, 80.0, 40.0, 40.0).unwrap();
        let b_half = b.with_weight(0.5).unwrap();
        let ba = merge_component(&b_half, &a, 80.0, 40.0, 40.0).unwrap();
        assert_relative_eq!(ab.mean(), ba.mean(), epsilon = 1e-14);
        assert_relative_eq!(ab.cov(), ba.cov(), epsilon = 1e-14);
    }

    #[test]
    fn far_component_is_appended() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = MixtureModel::single(GaussianComponent::standard(1), 100).unwrap();
        let pts = draw(&mut rng, 50, &v(&[50.0]), &DMatrix::identity(1, 1));
        let n = MixtureModel::single(GaussianComponent::new(1.0, v(&[50.0]), DMatrix::identity(1, 1)).unwrap(), 50).unwrap();
        let out = merge_mixtures(&g, &n, &[50], &[0; 50], &pts, 0.05, 0.05).unwrap();
        assert_eq!(out.model.len(), 2);
        assert_relative_eq!(out.model.components()[0].weight(), 100.0 / 150.0, epsilon = 1e-15);
        assert_relative_eq!(out.model.components()[1].weight(), 50.0 / 150.0, epsilon = 1e-15);
        assert_eq!(out.model.support_count(), 150);
        assert_eq!(out.decisions[0].matched, None);
    }

    #[test]
    fn identical_batch_merges_idempotently() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = draw(&mut rng, 400, &v(&[0.0, 0.0]), &DMatrix::identity(2, 2));
        let comp = GaussianComponent::new(1.0, sample_mean(&pts), sample_covariance(&pts, 0)).unwrap();
        let g = MixtureModel::single(comp.clone(), 400).unwrap();
        let n = MixtureModel::single(comp.clone(), 400).unwrap();
        let out = merge_mixtures(&g, &n, &[400], &[0; 400], &pts, 0.05, 0.05).unwrap();
        assert_eq!(out.model.len(), 1);
        let c = &out.model.components()[0];
        assert_eq!(c.weight(), 1.0);
        assert_relative_eq!(c.mean(), comp.mean(), epsilon = 1e-12);
        assert_relative_eq!(c.cov(), comp.cov(), epsilon = 1e-12);
    }

    #[test]
    fn count_ledger_with_match_and_novelty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = MixtureModel::normalized(
            vec![
                (0.8, v(&[0.0]), DMatrix::identity(1, 1)),
                (0.2, v(&[-30.0]), DMatrix::identity(1, 1) * 4.0),
            ],
            500,
        )
        .unwrap();
        let near = draw(&mut rng, 300, &v(&[0.0]), &DMatrix::identity(1, 1));
        let far = draw(&mut rng, 100, &v(&[40.0]), &(DMatrix::identity(1, 1) * 3.0));
        let pts: Vec<_> = near.iter().chain(&far).cloned().collect();
        let assignments: Vec<usize> = (0..400).map(|i| usize::from(i >= 300)).collect();
        let n = MixtureModel::normalized(
            vec![
                (0.75, sample_mean(&near), sample_covariance(&near, 0)),
                (0.25, sample_mean(&far), sample_covariance(&far, 0)),
            ],
            400,
        )
        .unwrap();
        let out = merge_mixtures(&g, &n, &[300, 100], &assignments, &pts, 0.05, 0.05).unwrap();
        assert_eq!(out.decisions[0].matched, Some(0));
        assert_eq!(out.decisions[1].matched, None);
        let w: Vec<f64> = out.model.components().iter().map(|c| c.weight()).collect();
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(w[0], (400.0 + 300.0) / 900.0, epsilon = 1e-12);
        assert_relative_eq!(w[1], 100.0 / 900.0, epsilon = 1e-12);
        assert_relative_eq!(w[2], 100.0 / 900.0, epsilon = 1e-12);
        assert_eq!(out.model.support_count(), 900);
    }

    #[test]
    fn inconsistent_counts_are_rejected() {
        let g = MixtureModel::single(GaussianComponent::standard(1), 10).unwrap();
        let n = MixtureModel::single(GaussianComponent::standard(1), 5).unwrap();
        let pts = vec![v(&[0.0]); 5];
        assert!(matches!(
            merge_mixtures(&g, &n, &[4], &[0; 4], &pts[..4], 0.05, 0.05),
            Err(Error::CountMismatch(_))
        ));
        assert!(matches!(
            merge_mixtures(&g, &n, &[5], &[0, 0, 0, 0, 1], &pts, 0.05, 0.05),
            Err(Error::CountMismatch(_))
        ));
    }
}
