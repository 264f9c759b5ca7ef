//! Covariance (W statistic) and mean (Hotelling T²) equivalence tests.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mixture::{cholesky_lower, forward_substitute, GaussianComponent};
use crate::special::{chi_squared_quantile, f_quantile};

fn check_sample(y: &[DVector<f64>]) -> Result<usize> {
    let d = y.first().map(|v| v.len()).unwrap_or(0);
    if y.len() <= d || d == 0 {
        return Err(Error::TooFewPoints {
            needed: d + 1,
            got: y.len(),
        });
    }
    if let Some(bad) = y.iter().find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch {
            context: "equivalence sample",
            expected: d,
            actual: bad.len(),
        });
    }
    Ok(d)
}

pub fn sample_mean(y: &[DVector<f64>]) -> DVector<f64> {
    let d = y[0].len();
    y.iter().fold(DVector::zeros(d), |acc, v| acc + v) / y.len() as f64
}

/// Sample covariance normalized by `m − ddof`.
pub fn sample_covariance(y: &[DVector<f64>], ddof: usize) -> DMatrix<f64> {
    let d = y[0].len();
    let mean = sample_mean(y);
    let mut s = DMatrix::zeros(d, d);
    for v in y {
        let c = v - &mean;
        s.ger(1.0, &c, &c, 1.0);
    }
    s / (y.len() - ddof) as f64
}

/// `W = (1/d)·Tr((Λ_y − I)²) − (d/m)·((1/d)·Tr Λ_y)² + d/m` with the
/// biased sample covariance `Λ_y`.
pub fn w_statistic(y: &[DVector<f64>]) -> Result<f64> {
    let d = check_sample(y)?;
    let m = y.len() as f64;
    let df = d as f64;
    let cov = sample_covariance(y, 0);
    let shifted = &cov - DMatrix::identity(d, d);
    let tr_sq = (&shifted * &shifted).trace();
    let tr = cov.trace() / df;
    Ok(tr_sq / df - df / m * tr * tr + df / m)
}

/// `m·W·d/2` against the χ² quantile with `d(d+1)/2` degrees of freedom.
/// Returns the statistic and whether equivalence is accepted.
pub fn covariance_equivalent(y: &[DVector<f64>], alpha: f64) -> Result<(f64, bool)> {
    check_alpha(alpha)?;
    let w = w_statistic(y)?;
    let d = y[0].len() as f64;
    let stat = y.len() as f64 * w * d / 2.0;
    let critical = chi_squared_quantile(1.0 - alpha, d * (d + 1.0) / 2.0);
    Ok((stat, stat < critical))
}

/// Hotelling `T² = m·(μ_n − μ_g)ᵀ Λ_y⁻¹ (μ_n − μ_g)`, accepted when the
/// scaled statistic is below the `F_{d, m−d}` quantile.
pub fn mean_equivalent(
    mu_n: &DVector<f64>,
    mu_g: &DVector<f64>,
    cov_y: &DMatrix<f64>,
    m: usize,
    alpha: f64,
) -> Result<(f64, bool)> {
    check_alpha(alpha)?;
    let d = mu_n.len();
    if mu_g.len() != d || cov_y.nrows() != d || cov_y.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "mean test operands",
            expected: d,
            actual: mu_g.len(),
        });
    }
    if m <= d {
        return Err(Error::TooFewPoints { needed: d + 1, got: m });
    }
    let l = cholesky_lower(cov_y, "mean test covariance")?;
    let z = forward_substitute(&l, &(mu_n - mu_g));
    let t2 = m as f64 * z.norm_squared();
    let (mf, df) = (m as f64, d as f64);
    let scaled = (mf - df) / (df * (mf - 1.0)) * t2;
    let critical = f_quantile(1.0 - alpha, df, mf - df);
    Ok((t2, scaled < critical))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("significance {alpha} outside (0, 1)")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceVerdict {
    /// W statistic of the whitened sample.
    pub w: f64,
    pub t_squared: f64,
    pub cov_equal: bool,
    pub mean_equal: bool,
}

impl EquivalenceVerdict {
    pub fn equivalent(&self) -> bool {
        self.cov_equal && self.mean_equal
    }
}

/// Tests whether `residuals` are consistent with `hypothesis`: the sample
/// is whitened by the hypothesis Cholesky factor, then both tests run in
/// the whitened space.
pub fn test_against(
    residuals: &[DVector<f64>],
    hypothesis: &GaussianComponent,
    alpha_cov: f64,
    alpha_mean: f64,
) -> Result<EquivalenceVerdict> {
    let y: Vec<DVector<f64>> = residuals.iter().map(|r| hypothesis.whiten(r)).collect();
    let d = check_sample(&y)?;
    if d != hypothesis.dim() {
        return Err(Error::DimensionMismatch {
            context: "residuals vs hypothesis",
            expected: hypothesis.dim(),
            actual: d,
        });
    }
    let w = w_statistic(&y)?;
    let (_, cov_equal) = covariance_equivalent(&y, alpha_cov)?;
    let mean_y = sample_mean(&y);
    let mu_g = hypothesis.whiten(hypothesis.mean());
    let cov_y = sample_covariance(&y, 1);
    let (t_squared, mean_equal) = match mean_equivalent(&mean_y, &mu_g, &cov_y, y.len(), alpha_mean) {
        Ok(v) => v,
        // a degenerate sample cannot demonstrate equal means
        Err(Error::NotPositiveDefinite { .. }) => (f64::INFINITY, false),
        Err(e) => return Err(e),
    };
    Ok(EquivalenceVerdict {
        w,
        t_squared,
        cov_equal,
        mean_equal,
    })
}
