//! Residual partitioning, model equivalence tests, mixture merging and the
//! per-epoch adaptation loop.
//!
//! All residuals here live in the normalized space `L_a⁻¹ r`, where `L_a`
//! is the Cholesky factor of a factor's declared covariance. The running
//! model therefore starts as `N(0, I)` regardless of the sensor.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, MixtureModel, VariationalConfig};

pub mod equivalence;
mod ice;
pub mod merge;

pub use equivalence::{covariance_equivalent, mean_equivalent, test_against, w_statistic, EquivalenceVerdict};
pub use ice::{ice_epoch, AdaptationReport, AdaptationSnapshot, IcePolicy, IceSession, ModelAdapter, ScreenedEpoch};
pub use merge::{merge_component, merge_mixtures, ComponentDecision, MergeOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    /// z-test threshold `T_r` in standard deviations.
    pub z_threshold: f64,
    /// Adapt once the outlier buffer holds more than this many residuals.
    pub buffer_threshold: usize,
    pub alpha_cov: f64,
    pub alpha_mean: f64,
    /// Drop buffered residuals older than this many epochs.
    pub buffer_horizon: Option<usize>,
    /// Support count `N` credited to the initial model.
    pub prior_support: u64,
    /// Fit and merge on a worker thread; the result is swapped in at the
    /// start of a later epoch.
    pub concurrent: bool,
    /// Size of the inlier residual reservoir kept for snapshots.
    pub inlier_sample: usize,
    pub variational: VariationalConfig,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            z_threshold: 3.0,
            buffer_threshold: 1000,
            alpha_cov: 0.05,
            alpha_mean: 0.05,
            buffer_horizon: None,
            prior_support: 100,
            concurrent: false,
            inlier_sample: 500,
            variational: VariationalConfig::default(),
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.z_threshold > 0.0) {
            return Err(Error::Config(format!("z threshold {} must be positive", self.z_threshold)));
        }
        for (name, a) in [("alpha_cov", self.alpha_cov), ("alpha_mean", self.alpha_mean)] {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("{name} = {a} outside (0, 1)")));
            }
        }
        let min = self.variational.min_points_for(dim);
        if self.buffer_threshold < min {
            return Err(Error::Config(format!(
                "buffer threshold {} below the minimum fit size {min}",
                self.buffer_threshold
            )));
        }
        Ok(())
    }
}

/// `√((r − μ)ᵀ Λ⁻¹ (r − μ))`; `|r − μ|/σ` in one dimension.
pub fn z_score(r: &DVector<f64>, comp: &GaussianComponent) -> Result<f64> {
    Ok(comp.mahalanobis_sq(r)?.sqrt())
}

/// Result of screening a batch of residuals against the running model.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub inliers: Vec<usize>,
    pub outliers: Vec<usize>,
    /// Max-mixture component selected for each residual.
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Scores every residual against its max-mixture component: `Z < T_r`
/// goes to the inliers, everything else to the outliers.
pub fn partition_residuals(residuals: &[DVector<f64>], model: &MixtureModel, t_r: f64) -> Result<Partition> {
    if model.is_empty() {
        return Err(Error::EmptyModel);
    }
    let mut p = Partition {
        inliers: Vec::new(),
        outliers: Vec::new(),
        selected: Vec::with_capacity(residuals.len()),
        scores: Vec::with_capacity(residuals.len()),
    };
    for (i, r) in residuals.iter().enumerate() {
        let k = model.max_mix_select(r)?;
        let z = z_score(r, &model.components()[k])?;
        if z < t_r {
            p.inliers.push(i);
        } else {
            p.outliers.push(i);
        }
        p.selected.push(k);
        p.scores.push(z);
    }
    Ok(p)
}

/// Outlier residuals waiting for the next adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBuffer {
    entries: Vec<(DVector<f64>, usize)>,
    threshold: usize,
}

impl ResidualBuffer {
    pub fn new(threshold: usize) -> Result<Self> {
        if threshold == 0 {
            return Err(Error::Config("buffer threshold must be positive".into()));
        }
        Ok(Self {
            entries: Vec::new(),
            threshold,
        })
    }

    pub fn push(&mut self, residual: DVector<f64>, epoch: usize) -> Result<()> {
        if let Some((first, _)) = self.entries.first() {
            if first.len() != residual.len() {
                return Err(Error::DimensionMismatch {
                    context: "buffered residual",
                    expected: first.len(),
                    actual: residual.len(),
                });
            }
        }
        self.entries.push((residual, epoch));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// `|R_O| > T_c`.
    pub fn is_full(&self) -> bool {
        self.entries.len() > self.threshold
    }

    pub fn entries(&self) -> &[(DVector<f64>, usize)] {
        &self.entries
    }

    pub fn residuals(&self) -> Vec<DVector<f64>> {
        self.entries.iter().map(|(r, _)| r.clone()).collect()
    }

    /// Drops entries stamped more than `horizon` epochs before `now`.
    pub fn expire(&mut self, now: usize, horizon: usize) {
        self.entries.retain(|(_, e)| now.saturating_sub(*e) <= horizon);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}
