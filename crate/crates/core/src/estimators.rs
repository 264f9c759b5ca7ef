//! The four robust estimation strategies run over a dataset: plain least
//! squares, dynamic covariance scaling, a static max-mixture and the
//! adaptive mixture.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adaptation::{ice_epoch, AdaptationConfig, AdaptationReport, AdaptationSnapshot, IceSession};
use crate::error::{Error, Result};
use crate::graph::{
    normalized_residual, EpochBatch, Factor, IncrementalConfig, IncrementalSession, KeepTreatments, NoiseModel,
    NoisePolicy, StateVector, Treatment, VarId,
};
use crate::mixture::{GaussianComponent, MixtureModel};
use crate::sim::{Dataset, ObservationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    L2,
    Dcs,
    Mm,
    Ice,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [EstimatorKind::L2, EstimatorKind::Dcs, EstimatorKind::Mm, EstimatorKind::Ice];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::L2 => "l2",
            EstimatorKind::Dcs => "dcs",
            EstimatorKind::Mm => "mm",
            EstimatorKind::Ice => "ice",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown estimator {s:?} (expected l2, dcs, mm or ice)")))
    }
}

/// Dynamic covariance scaling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcsConfig {
    pub phi: f64,
    /// Iterate reweighting to convergence every epoch instead of a single
    /// pass at the predicted state.
    pub full_irls: bool,
    pub max_irls_iterations: usize,
}

impl Default for DcsConfig {
    fn default() -> Self {
        Self {
            phi: 4.0,
            full_irls: false,
            max_irls_iterations: 10,
        }
    }
}

/// Static two-component model: nominal a-priori noise and an inflated
/// version of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmConfig {
    pub inlier_weight: f64,
    pub outlier_weight: f64,
    pub inflation: f64,
}

impl Default for MmConfig {
    fn default() -> Self {
        Self {
            inlier_weight: 0.9,
            outlier_weight: 0.1,
            inflation: 100.0,
        }
    }
}

impl MmConfig {
    /// The model in normalized residual space. A zero outlier weight leaves
    /// only the inlier component.
    pub fn model(&self, dim: usize) -> Result<MixtureModel> {
        let (wi, wo) = (self.inlier_weight, self.outlier_weight);
        if !(wi > 0.0) || wo < 0.0 || !(self.inflation > 0.0) {
            return Err(Error::Config(format!(
                "max-mixture weights ({wi}, {wo}) and inflation {} must be positive",
                self.inflation
            )));
        }
        let eye = DMatrix::identity(dim, dim);
        let mut parts = vec![(wi, DVector::zeros(dim), eye.clone())];
        if wo > 0.0 {
            parts.push((wo, DVector::zeros(dim), eye * self.inflation));
        }
        MixtureModel::normalized(parts, 0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub incremental: IncrementalConfig,
    pub dcs: DcsConfig,
    pub mm: MmConfig,
    pub adaptation: AdaptationConfig,
}

/// `s = min(1, 2Φ/(Φ + e))` for squared normalized error `e`. The factor
/// weight used in the information form is `s²`.
pub fn dcs_scale(e: f64, phi: f64) -> f64 {
    (2.0 * phi / (phi + e)).min(1.0)
}

pub fn dcs_weight(e: f64, phi: f64) -> f64 {
    dcs_scale(e, phi).powi(2)
}

struct DcsPolicy {
    phi: f64,
}

impl NoisePolicy for DcsPolicy {
    fn relinearized(&mut self, _factor: &Factor, r: &DVector<f64>, _current: &Treatment) -> Result<Treatment> {
        Ok(Treatment::weighted(dcs_weight(r.norm_squared(), self.phi)))
    }
}

struct MaxMixPolicy<'a> {
    model: &'a MixtureModel,
}

impl MaxMixPolicy<'_> {
    fn select(&self, r: &DVector<f64>) -> Result<Treatment> {
        let k = self.model.max_mix_select(r)?;
        Ok(Treatment::with_component(self.model.components()[k].clone()))
    }
}

impl NoisePolicy for MaxMixPolicy<'_> {
    fn relinearized(&mut self, _factor: &Factor, r: &DVector<f64>, _current: &Treatment) -> Result<Treatment> {
        self.select(r)
    }
}

/// Output of one estimator over a dataset.
#[derive(Debug, Clone)]
pub struct EstimatorRun {
    pub kind: EstimatorKind,
    pub epochs: Vec<usize>,
    /// Smoothed state of every epoch after the final update.
    pub trajectory: Vec<DVector<f64>>,
    /// State of each epoch right after its own update.
    pub filtered: Vec<DVector<f64>>,
    /// Wall time of each epoch's update call, in nanoseconds.
    pub update_ns: Vec<u64>,
    /// ICE only: one record per epoch.
    pub reports: Vec<AdaptationReport>,
    pub snapshots: Vec<AdaptationSnapshot>,
    pub adaptations: usize,
    pub naive_adaptations: usize,
    pub failed_fits: usize,
    pub relinearizations: usize,
}

fn var(epoch: usize) -> VarId {
    VarId::new(epoch, "x")
}

/// Converts one dataset epoch into graph additions. The initial value is
/// the prior mean, or the previous estimate moved by odometry.
pub fn epoch_batch(dataset: &Dataset, position: usize, previous: Option<&DVector<f64>>) -> Result<EpochBatch> {
    let epoch = &dataset.epochs[position];
    let id = var(epoch.index);
    let prev_id = position.checked_sub(1).map(|p| var(dataset.epochs[p].index));
    let mut init = previous.cloned();
    let mut prior_seen = false;
    let mut factors = Vec::with_capacity(epoch.observations.len());
    for o in &epoch.observations {
        let f = match o.kind {
            ObservationKind::Prior => {
                prior_seen = true;
                init = Some(o.value.clone());
                Factor::prior(id.clone(), o.value.clone(), o.cov.clone())?
            }
            ObservationKind::Between => {
                let from = prev_id
                    .clone()
                    .ok_or_else(|| Error::Config("odometry in the first epoch".into()))?;
                if !prior_seen {
                    init = previous.map(|p| p + &o.value);
                }
                Factor::between(from, id.clone(), o.value.clone(), o.cov.clone())?
            }
            ObservationKind::Range | ObservationKind::Pseudorange => {
                let anchor = o
                    .anchor
                    .clone()
                    .ok_or_else(|| Error::Config(format!("epoch {}: ranging without an anchor", epoch.index)))?;
                let noise = NoiseModel::Adaptive(o.cov.clone());
                if o.kind == ObservationKind::Range {
                    Factor::range(id.clone(), anchor, o.value[0], noise)?
                } else {
                    Factor::pseudorange(id.clone(), anchor, o.value[0], noise)?
                }
            }
        };
        factors.push(f);
    }
    let init = init.ok_or_else(|| Error::Config(format!("epoch {} has no prior or predecessor", epoch.index)))?;
    if init.len() != dataset.state_dim {
        return Err(Error::DimensionMismatch {
            context: "epoch state",
            expected: dataset.state_dim,
            actual: init.len(),
        });
    }
    Ok(EpochBatch {
        epoch: epoch.index,
        variables: vec![(id, init)],
        factors,
    })
}

fn check_dataset(dataset: &Dataset) -> Result<()> {
    if dataset.epochs.is_empty() {
        return Err(Error::Config("dataset has no epochs".into()));
    }
    if dataset.epochs.windows(2).any(|w| w[0].index >= w[1].index) {
        return Err(Error::Config("epochs are not strictly increasing".into()));
    }
    if !dataset.epochs[0].observations.iter().any(|o| o.kind == ObservationKind::Prior) {
        return Err(Error::Config("first epoch has no prior".into()));
    }
    Ok(())
}

enum Engine {
    Plain(IncrementalSession),
    Dcs(IncrementalSession),
    Mm(IncrementalSession, MixtureModel),
    Ice(Box<IceSession>),
}

impl Engine {
    fn session(&self) -> &IncrementalSession {
        match self {
            Engine::Plain(s) | Engine::Dcs(s) | Engine::Mm(s, _) => s,
            Engine::Ice(ice) => &ice.smoother,
        }
    }
}

fn treated(batch: EpochBatch, state: &StateVector, mut treat: impl FnMut(&Factor, &DVector<f64>) -> Result<Treatment>) -> Result<Vec<(Factor, Treatment)>> {
    batch
        .factors
        .into_iter()
        .map(|f| {
            if f.is_adaptive() {
                let r = normalized_residual(&f, state)?;
                let t = treat(&f, &r)?;
                Ok((f, t))
            } else {
                Ok((f, Treatment::nominal()))
            }
        })
        .collect()
}

fn dcs_update(session: &mut IncrementalSession, batch: EpochBatch, config: &DcsConfig) -> Result<()> {
    let phi = config.phi;
    for (id, init) in batch.variables.iter().cloned() {
        session.add_variable(id, init)?;
    }
    let factors = treated(
        EpochBatch {
            variables: Vec::new(),
            ..batch
        },
        session.linearization_point(),
        |_, r| Ok(Treatment::weighted(dcs_weight(r.norm_squared(), phi))),
    )?;
    for (f, t) in factors {
        session.add_factor(f, t)?;
    }
    let mut policy = DcsPolicy { phi };
    session.finish_update(&mut policy)?;
    if config.full_irls {
        for _ in 0..config.max_irls_iterations {
            let before = session.estimate().clone();
            session.relinearize(&mut policy)?;
            if session.estimate().max_abs_diff(&before) < 1e-9 {
                break;
            }
        }
    }
    Ok(())
}

fn mm_update(session: &mut IncrementalSession, model: &MixtureModel, batch: EpochBatch) -> Result<()> {
    for (id, init) in batch.variables.iter().cloned() {
        session.add_variable(id, init)?;
    }
    let policy = MaxMixPolicy { model };
    let factors = treated(
        EpochBatch {
            variables: Vec::new(),
            ..batch
        },
        session.linearization_point(),
        |_, r| policy.select(r),
    )?;
    for (f, t) in factors {
        session.add_factor(f, t)?;
    }
    session.finish_update(&mut MaxMixPolicy { model })?;
    Ok(())
}

/// Runs one estimator over every epoch of `dataset`.
pub fn run_estimator(kind: EstimatorKind, dataset: &Dataset, config: &EstimatorConfig) -> Result<EstimatorRun> {
    check_dataset(dataset)?;
    let residual_dim = 1;
    let mut engine = match kind {
        EstimatorKind::L2 => Engine::Plain(IncrementalSession::new(config.incremental)),
        EstimatorKind::Dcs => {
            if !(config.dcs.phi > 0.0) {
                return Err(Error::Config(format!("DCS phi {} must be positive", config.dcs.phi)));
            }
            Engine::Dcs(IncrementalSession::new(config.incremental))
        }
        EstimatorKind::Mm => Engine::Mm(IncrementalSession::new(config.incremental), config.mm.model(residual_dim)?),
        EstimatorKind::Ice => Engine::Ice(Box::new(IceSession::new(
            config.incremental,
            config.adaptation.clone(),
            residual_dim,
        )?)),
    };

    let n = dataset.epochs.len();
    let mut filtered = Vec::with_capacity(n);
    let mut update_ns = Vec::with_capacity(n);
    let mut reports = Vec::new();
    let mut previous: Option<DVector<f64>> = None;
    for position in 0..n {
        let batch = epoch_batch(dataset, position, previous.as_ref())?;
        let start = Instant::now();
        match &mut engine {
            Engine::Plain(s) => {
                for (id, init) in batch.variables {
                    s.add_variable(id, init)?;
                }
                for f in batch.factors {
                    s.add_factor(f, Treatment::nominal())?;
                }
                s.finish_update(&mut KeepTreatments)?;
            }
            Engine::Dcs(s) => dcs_update(s, batch, &config.dcs)?,
            Engine::Mm(s, model) => mm_update(s, model, batch)?,
            Engine::Ice(ice) => {
                let (_, _, report) = ice_epoch(ice, batch)?;
                reports.push(report);
            }
        }
        update_ns.push(start.elapsed().as_nanos() as u64);
        let x = engine.session().estimate().value(position).clone();
        previous = Some(x.clone());
        filtered.push(x);
    }

    let (adaptations, naive_adaptations, failed_fits, snapshots) = match &mut engine {
        Engine::Ice(ice) => {
            ice.adapter.wait()?;
            (
                ice.adapter.adaptations(),
                ice.adapter.naive_adaptations(),
                ice.adapter.failed_fits(),
                ice.adapter.take_snapshots(),
            )
        }
        _ => (0, 0, 0, Vec::new()),
    };
    let session = engine.session();
    Ok(EstimatorRun {
        kind,
        epochs: dataset.epochs.iter().map(|e| e.index).collect(),
        trajectory: session.estimate().values().to_vec(),
        filtered,
        update_ns,
        reports,
        snapshots,
        adaptations,
        naive_adaptations,
        failed_fits,
        relinearizations: session.relinearization_count(),
    })
}

/// Component index chosen for `r` by direct evaluation of every weighted
/// log density; used to cross-check the mixture's own selection.
pub fn brute_force_select(model: &MixtureModel, r: &DVector<f64>) -> usize {
    let density = |c: &GaussianComponent| {
        let d = r - c.mean();
        let inv = c.cov().clone().try_inverse().expect("component covariance is invertible");
        let q = (d.transpose() * inv * &d)[0];
        let det = c.cov().determinant();
        c.weight().ln() - 0.5 * q - 0.5 * (r.len() as f64 * std::f64::consts::TAU.ln() + det.ln())
    };
    let mut best = 0;
    let mut best_p = f64::NEG_INFINITY;
    for (k, c) in model.components().iter().enumerate() {
        let p = density(c);
        if p > best_p {
            best = k;
            best_p = p;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, ContaminationSpec, Epoch, Observation, ScenarioConfig};
    use approx::assert_relative_eq;

    #[test]
    fn dcs_examples() {
        assert_eq!(dcs_scale(0.0, 1.0), 1.0);
        assert_eq!(dcs_scale(1.0, 1.0), 1.0);
        assert_eq!(dcs_scale(3.0, 1.0), 0.5);
        assert_eq!(dcs_weight(3.0, 1.0), 0.25);
        let mut last = 1.0;
        for i in 0..1000 {
            let w = dcs_weight(i as f64 * 0.1, 2.0);
            assert!(w > 0.0 && w <= 1.0 && w <= last);
            last = w;
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("ICE".parse::<EstimatorKind>().unwrap(), EstimatorKind::Ice);
        assert_eq!(" l2".parse::<EstimatorKind>().unwrap(), EstimatorKind::L2);
        assert!("huber".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn max_mix_matches_brute_force() {
        let model = MmConfig::default().model(1).unwrap();
        for i in -200..200 {
            let r = DVector::from_element(1, i as f64 * 0.05);
            assert_eq!(model.max_mix_select(&r).unwrap(), brute_force_select(&model, &r), "r = {}", r[0]);
        }
        assert_eq!(model.max_mix_select(&DVector::from_element(1, 2.9)).unwrap(), 0);
        assert_eq!(model.max_mix_select(&DVector::from_element(1, 3.1)).unwrap(), 1);
    }

    fn noiseless(epochs: usize) -> Dataset {
        let mut ds = generate_dataset(&ScenarioConfig {
            epochs,
            ..Default::default()
        })
        .unwrap()
        .dataset;
        let truth = ds.truth.clone();
        let p = ds.position_dim;
        for e in &mut ds.epochs {
            let x = &truth[e.index];
            for o in &mut e.observations {
                o.value = match o.kind {
                    ObservationKind::Prior => x.clone(),
                    ObservationKind::Between => x - &truth[e.index - 1],
                    _ => {
                        let a = o.anchor.as_ref().unwrap();
                        DVector::from_element(1, (x.rows(0, p) - a).norm() + x[p])
                    }
                };
            }
        }
        ds
    }

    #[test]
    fn clean_data_all_agree() {
        let ds = noiseless(40);
        let runs: Vec<_> = EstimatorKind::ALL
            .iter()
            .map(|k| run_estimator(*k, &ds, &EstimatorConfig::default()).unwrap())
            .collect();
        for run in &runs[1..] {
            for (a, b) in run.trajectory.iter().zip(&runs[0].trajectory) {
                assert_relative_eq!(a, b, epsilon = 1e-6);
            }
        }
        for (x, t) in runs[0].trajectory.iter().zip(&ds.truth) {
            assert_relative_eq!(x, t, epsilon = 1e-6);
        }
    }

    #[test]
    fn degenerate_mixture_is_least_squares() {
        let ds = generate_dataset(&ScenarioConfig {
            epochs: 60,
            contamination: ContaminationSpec {
                epsilon: 0.2,
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap()
        .dataset;
        let config = EstimatorConfig {
            mm: MmConfig {
                inlier_weight: 1.0,
                outlier_weight: 0.0,
                inflation: 1.0,
            },
            ..Default::default()
        };
        let l2 = run_estimator(EstimatorKind::L2, &ds, &config).unwrap();
        let mm = run_estimator(EstimatorKind::Mm, &ds, &config).unwrap();
        for (a, b) in mm.trajectory.iter().zip(&l2.trajectory) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_gross_outlier_hurts_least_squares_most() {
        let mut ds = noiseless(20);
        let bad = 12;
        let o: &mut Observation = ds.epochs[bad].observations.iter_mut().find(|o| o.kind.is_ranging()).unwrap();
        o.value[0] += 50.0;
        let err = |kind| {
            let run = run_estimator(kind, &ds, &EstimatorConfig::default()).unwrap();
            (run.trajectory[bad].rows(0, 2) - ds.truth[bad].rows(0, 2)).norm()
        };
        let l2 = err(EstimatorKind::L2);
        for kind in [EstimatorKind::Dcs, EstimatorKind::Mm, EstimatorKind::Ice] {
            assert!(err(kind) < l2, "{kind}: {} vs l2 {l2}", err(kind));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = generate_dataset(&ScenarioConfig {
            epochs: 80,
            contamination: ContaminationSpec {
                epsilon: 0.3,
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap()
        .dataset;
        for kind in EstimatorKind::ALL {
            let a = run_estimator(kind, &ds, &EstimatorConfig::default()).unwrap();
            let b = run_estimator(kind, &ds, &EstimatorConfig::default()).unwrap();
            assert_eq!(a.trajectory, b.trajectory, "{kind}");
            assert_eq!(a.trajectory.len(), 80);
        }
    }

    #[test]
    fn rejects_malformed_datasets() {
        let mut ds = noiseless(5);
        ds.epochs[0].observations.retain(|o| o.kind != ObservationKind::Prior);
        assert!(run_estimator(EstimatorKind::L2, &ds, &EstimatorConfig::default()).is_err());
        let mut ds = noiseless(5);
        ds.epochs.swap(1, 2);
        assert!(run_estimator(EstimatorKind::L2, &ds, &EstimatorConfig::default()).is_err());
        let empty = Dataset {
            epochs: Vec::<Epoch>::new(),
            ..noiseless(2)
        };
        assert!(run_estimator(EstimatorKind::Ice, &empty, &EstimatorConfig::default()).is_err());
    }
}
