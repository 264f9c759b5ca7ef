use std::thread::{self, JoinHandle};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::merge::{merge_mixtures, ComponentDecision, MergeOutcome};
use super::{partition_residuals, AdaptationConfig, Partition, ResidualBuffer};
use crate::error::{Error, Result};
use crate::graph::{
    normalized_residual, EpochBatch, Factor, IncrementalConfig, IncrementalSession, NoisePolicy, StateVector, Treatment,
};
use crate::mixture::{fit_mixture_variational, GaussianComponent, MixtureModel};

/// Per-epoch record, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptationReport {
    pub epoch: usize,
    pub n_inliers: usize,
    pub n_outliers: usize,
    /// Buffer length after this epoch's outliers were appended, before any
    /// clearing.
    pub buffer_size: usize,
    pub adapted: bool,
    pub n_components: usize,
    pub wall_time_us: u64,
}

/// Model state around one adaptation event.
#[derive(Debug, Clone, Serialize)]
pub struct AdaptationSnapshot {
    pub epoch: usize,
    pub before: MixtureModel,
    pub after: MixtureModel,
    pub buffered_residuals: Vec<Vec<f64>>,
    pub inlier_residuals: Vec<Vec<f64>>,
    pub decisions: Vec<ComponentDecision>,
}

/// Outcome of screening one epoch's residuals.
#[derive(Debug, Clone)]
pub struct ScreenedEpoch {
    pub partition: Partition,
    /// Component chosen for each inlier, aligned with `partition.inliers`,
    /// taken from the model the residuals were screened against.
    pub inlier_components: Vec<GaussianComponent>,
    pub buffer_size: usize,
    pub adapted: bool,
}

struct PendingFit {
    epoch: usize,
    before: MixtureModel,
    residuals: Vec<(DVector<f64>, usize)>,
    handle: JoinHandle<Result<MergeOutcome>>,
}

fn adapt_model(model: &MixtureModel, residuals: &[DVector<f64>], config: &AdaptationConfig) -> Result<MergeOutcome> {
    let fit = fit_mixture_variational(residuals, &config.variational)?;
    merge_mixtures(
        model,
        &fit.model,
        &fit.counts,
        &fit.assignments,
        residuals,
        config.alpha_cov,
        config.alpha_mean,
    )
}

fn rows(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|r| r.iter().copied().collect()).collect()
}

/// Running mixture model plus the outlier buffer that drives its
/// adaptation.
pub struct ModelAdapter {
    config: AdaptationConfig,
    model: MixtureModel,
    buffer: ResidualBuffer,
    adaptations: usize,
    failed_fits: usize,
    naive_pending: usize,
    naive_adaptations: usize,
    snapshots: Vec<AdaptationSnapshot>,
    reservoir: Vec<DVector<f64>>,
    inliers_seen: u64,
    rng: ChaCha8Rng,
    pending: Option<PendingFit>,
}

impl ModelAdapter {
    /// Starts from `N(0, I)` in `dim` normalized dimensions.
    pub fn new(config: AdaptationConfig, dim: usize) -> Result<Self> {
        let model = MixtureModel::single(GaussianComponent::standard(dim), config.prior_support)?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: AdaptationConfig, model: MixtureModel) -> Result<Self> {
        config.validate(model.dim())?;
        let buffer = ResidualBuffer::new(config.buffer_threshold)?;
        let rng = ChaCha8Rng::seed_from_u64(config.variational.seed ^ 0x1ce);
        Ok(Self {
            config,
            model,
            buffer,
            adaptations: 0,
            failed_fits: 0,
            naive_pending: 0,
            naive_adaptations: 0,
            snapshots: Vec::new(),
            reservoir: Vec::new(),
            inliers_seen: 0,
            rng,
            pending: None,
        })
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.config
    }

    pub fn model(&self) -> &MixtureModel {
        &self.model
    }

    pub fn buffer(&self) -> &ResidualBuffer {
        &self.buffer
    }

    pub fn adaptations(&self) -> usize {
        self.adaptations
    }

    pub fn failed_fits(&self) -> usize {
        self.failed_fits
    }

    /// Adaptations that would have run with the z-test disabled, i.e. with
    /// every residual counted against the buffer threshold.
    pub fn naive_adaptations(&self) -> usize {
        self.naive_adaptations
    }

    pub fn snapshots(&self) -> &[AdaptationSnapshot] {
        &self.snapshots
    }

    pub fn take_snapshots(&mut self) -> Vec<AdaptationSnapshot> {
        std::mem::take(&mut self.snapshots)
    }

    fn sample_inlier(&mut self, r: &DVector<f64>) {
        self.inliers_seen += 1;
        let cap = self.config.inlier_sample;
        if cap == 0 {
            return;
        }
        if self.reservoir.len() < cap {
            self.reservoir.push(r.clone());
        } else {
            let j = self.rng.random_range(0..self.inliers_seen);
            if (j as usize) < cap {
                self.reservoir[j as usize] = r.clone();
            }
        }
    }

    fn install(&mut self, epoch: usize, before: MixtureModel, residuals: &[DVector<f64>], outcome: MergeOutcome) {
        let after = outcome.model;
        self.snapshots.push(AdaptationSnapshot {
            epoch,
            before,
            after: after.clone(),
            buffered_residuals: rows(residuals),
            inlier_residuals: rows(&self.reservoir),
            decisions: outcome.decisions,
        });
        self.model = after;
        self.adaptations += 1;
    }

    /// Swaps in a finished background fit. With `block`, waits for it.
    pub fn poll(&mut self, block: bool) -> Result<bool> {
        let ready = match &self.pending {
            Some(p) => block || p.handle.is_finished(),
            None => false,
        };
        if !ready {
            return Ok(false);
        }
        let p = self.pending.take().expect("checked above");
        let result = p
            .handle
            .join()
            .map_err(|_| Error::Config("adaptation worker panicked".into()))?;
        match result {
            Ok(mut outcome) => {
                // inliers credited while the fit was running
                let accrued = self.model.support_count() - p.before.support_count();
                outcome.model.add_support(accrued);
                let residuals: Vec<DVector<f64>> = p.residuals.iter().map(|(r, _)| r.clone()).collect();
                self.install(p.epoch, p.before, &residuals, outcome);
                Ok(true)
            }
            Err(_) => {
                self.failed_fits += 1;
                let mut restored = ResidualBuffer::new(self.config.buffer_threshold)?;
                for (r, e) in p.residuals.into_iter().chain(self.buffer.entries().iter().cloned()) {
                    restored.push(r, e)?;
                }
                self.buffer = restored;
                Ok(false)
            }
        }
    }

    /// Blocks until any background fit has been applied.
    pub fn wait(&mut self) -> Result<()> {
        self.poll(true).map(|_| ())
    }

    /// Screens normalized residuals, buffers the outliers and adapts the
    /// model when the buffer overflows.
    pub fn process(&mut self, epoch: usize, residuals: &[DVector<f64>]) -> Result<ScreenedEpoch> {
        self.poll(false)?;
        if let Some(h) = self.config.buffer_horizon {
            self.buffer.expire(epoch, h);
        }
        let partition = partition_residuals(residuals, &self.model, self.config.z_threshold)?;
        let inlier_components = partition
            .inliers
            .iter()
            .map(|&i| self.model.components()[partition.selected[i]].clone())
            .collect();
        for &i in &partition.outliers {
            self.buffer.push(residuals[i].clone(), epoch)?;
        }
        for &i in &partition.inliers {
            self.sample_inlier(&residuals[i]);
        }
        self.model.add_support(partition.inliers.len() as u64);

        self.naive_pending += residuals.len();
        if self.naive_pending > self.config.buffer_threshold {
            self.naive_adaptations += 1;
            self.naive_pending = 0;
        }

        let buffer_size = self.buffer.len();
        let mut adapted = false;
        if self.buffer.is_full() && self.pending.is_none() {
            let batch = self.buffer.residuals();
            if self.config.concurrent {
                let model = self.model.clone();
                let config = self.config.clone();
                let worker_batch = batch.clone();
                let handle = thread::spawn(move || adapt_model(&model, &worker_batch, &config));
                self.pending = Some(PendingFit {
                    epoch,
                    before: self.model.clone(),
                    residuals: self.buffer.entries().to_vec(),
                    handle,
                });
                self.buffer.clear();
                adapted = true;
            } else {
                match adapt_model(&self.model, &batch, &self.config) {
                    Ok(outcome) => {
                        let before = self.model.clone();
                        self.install(epoch, before, &batch, outcome);
                        self.buffer.clear();
                        adapted = true;
                    }
                    Err(_) => self.failed_fits += 1,
                }
            }
        }
        Ok(ScreenedEpoch {
            partition,
            inlier_components,
            buffer_size,
            adapted,
        })
    }
}

/// Reselects every adaptive factor's component by max-mixture.
pub struct IcePolicy<'a> {
    pub model: &'a MixtureModel,
}

impl NoisePolicy for IcePolicy<'_> {
    fn relinearized(&mut self, _factor: &Factor, r: &DVector<f64>, _current: &Treatment) -> Result<Treatment> {
        let k = self.model.max_mix_select(r)?;
        Ok(Treatment::with_component(self.model.components()[k].clone()))
    }
}

/// Incremental smoother driven by an adapting noise model.
pub struct IceSession {
    pub smoother: IncrementalSession,
    pub adapter: ModelAdapter,
}

impl IceSession {
    pub fn new(incremental: IncrementalConfig, adaptation: AdaptationConfig, dim: usize) -> Result<Self> {
        Ok(Self {
            smoother: IncrementalSession::new(incremental),
            adapter: ModelAdapter::new(adaptation, dim)?,
        })
    }
}

/// One ICE epoch: screen adaptive observations at the current estimate,
/// adapt the model if the buffer overflows, add the conforming factors and
/// update the smoother. Fixed-noise factors are always added.
pub fn ice_epoch(ice: &mut IceSession, batch: EpochBatch) -> Result<(StateVector, MixtureModel, AdaptationReport)> {
    let start = Instant::now();
    for (id, init) in batch.variables {
        ice.smoother.add_variable(id, init)?;
    }
    let (adaptive, fixed): (Vec<Factor>, Vec<Factor>) = batch.factors.into_iter().partition(Factor::is_adaptive);
    for f in fixed {
        ice.smoother.add_factor(f, Treatment::nominal())?;
    }
    let residuals = adaptive
        .iter()
        .map(|f| normalized_residual(f, ice.smoother.estimate()))
        .collect::<Result<Vec<_>>>()?;
    let screened = if residuals.is_empty() {
        None
    } else {
        Some(ice.adapter.process(batch.epoch, &residuals)?)
    };
    let mut adaptive: Vec<Option<Factor>> = adaptive.into_iter().map(Some).collect();
    if let Some(s) = &screened {
        for (&i, comp) in s.partition.inliers.iter().zip(&s.inlier_components) {
            let f = adaptive[i].take().expect("inlier indices are unique");
            ice.smoother.add_factor(f, Treatment::with_component(comp.clone()))?;
        }
    }
    let mut policy = IcePolicy {
        model: &ice.adapter.model,
    };
    let state = ice.smoother.finish_update(&mut policy)?.clone();
    let report = AdaptationReport {
        epoch: batch.epoch,
        n_inliers: screened.as_ref().map_or(0, |s| s.partition.inliers.len()),
        n_outliers: screened.as_ref().map_or(0, |s| s.partition.outliers.len()),
        buffer_size: screened.as_ref().map_or(ice.adapter.buffer.len(), |s| s.buffer_size),
        adapted: screened.as_ref().is_some_and(|s| s.adapted),
        n_components: ice.adapter.model.len(),
        wall_time_us: start.elapsed().as_micros() as u64,
    };
    Ok((state, ice.adapter.model.clone(), report))
}
