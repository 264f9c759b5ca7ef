//! Synthetic localization datasets with contaminated-Gaussian ranging
//! noise.
//!
//! Every epoch draws from its own ChaCha8 stream, so an epoch's
//! observations do not depend on how many values earlier epochs consumed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod io;

pub use io::{load_dataset, save_dataset};

/// Name of the generator recorded in dataset metadata.
pub const PRNG: &str = "ChaCha8";

const TRAJECTORY_STREAM: u64 = 0;
const OBSERVATION_STREAM: u64 = 1 << 32;

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryKind {
    ConstantVelocity {
        start: Vec<f64>,
        velocity: Vec<f64>,
    },
    /// Constant-speed traversal of a closed polyline, repeated as needed.
    Waypoints {
        points: Vec<Vec<f64>>,
        speed: f64,
    },
    RandomWalk {
        start: Vec<f64>,
        /// Per-axis standard deviation of each step.
        step_std: Vec<f64>,
    },
}

impl Default for TrajectoryKind {
    fn default() -> Self {
        TrajectoryKind::Waypoints {
            points: vec![vec![0.0, 0.0], vec![60.0, 0.0], vec![60.0, 60.0], vec![0.0, 60.0]],
            speed: 1.0,
        }
    }
}

/// Ground-truth positions for `n_epochs` epochs.
pub fn generate_trajectory(kind: &TrajectoryKind, n_epochs: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    if n_epochs < 2 {
        return Err(Error::Config(format!("need at least 2 epochs, got {n_epochs}")));
    }
    let check_dim = |d: usize, what: &str| {
        if d == 2 || d == 3 {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} must be 2D or 3D, got {d} entries")))
        }
    };
    match kind {
        TrajectoryKind::ConstantVelocity { start, velocity } => {
            check_dim(start.len(), "start")?;
            if velocity.len() != start.len() {
                return Err(Error::Config("velocity and start dimensions differ".into()));
            }
            let s = DVector::from_column_slice(start);
            let v = DVector::from_column_slice(velocity);
            Ok((0..n_epochs).map(|t| &s + &v * t as f64).collect())
        }
        TrajectoryKind::Waypoints { points, speed } => {
            if points.len() < 2 {
                return Err(Error::Config("need at least two waypoints".into()));
            }
            check_dim(points[0].len(), "waypoint")?;
            if points.iter().any(|p| p.len() != points[0].len()) {
                return Err(Error::Config("waypoints have mixed dimensions".into()));
            }
            if !(*speed > 0.0) {
                return Err(Error::Config(format!("speed {speed} must be positive")));
            }
            let pts: Vec<DVector<f64>> = points.iter().map(|p| DVector::from_column_slice(p)).collect();
            let legs: Vec<f64> = (0..pts.len()).map(|i| (&pts[(i + 1) % pts.len()] - &pts[i]).norm()).collect();
            let perimeter: f64 = legs.iter().sum();
            if !(perimeter > 0.0) {
                return Err(Error::Config("waypoints are all identical".into()));
            }
            Ok((0..n_epochs)
                .map(|t| {
                    let mut s = (speed * t as f64) % perimeter;
                    let mut i = 0;
                    while s > legs[i] {
                        s -= legs[i];
                        i = (i + 1) % legs.len();
                    }
                    let a = &pts[i];
                    let b = &pts[(i + 1) % pts.len()];
                    if legs[i] == 0.0 {
                        a.clone()
                    } else {
                        a + (b - a) * (s / legs[i])
                    }
                })
                .collect())
        }
        TrajectoryKind::RandomWalk { start, step_std } => {
            check_dim(start.len(), "start")?;
            if step_std.len() != start.len() || step_std.iter().any(|s| *s < 0.0) {
                return Err(Error::Config("step_std must match start and be nonnegative".into()));
            }
            let mut rng = epoch_rng(seed, TRAJECTORY_STREAM);
            let mut p = DVector::from_column_slice(start);
            let mut out = Vec::with_capacity(n_epochs);
            out.push(p.clone());
            for _ in 1..n_epochs {
                for (k, s) in step_std.iter().enumerate() {
                    p[k] += s * gaussian(&mut rng);
                }
                out.push(p.clone());
            }
            Ok(out)
        }
    }
}

/// Outlier parameters taking effect from `start_epoch` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub start_epoch: usize,
    pub epsilon: f64,
    pub offset: f64,
    pub k: f64,
}

/// Each ranging observation is an outlier with probability `epsilon`,
/// drawn from `N(offset, k·σ²)` instead of `N(0, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContaminationSpec {
    pub epsilon: f64,
    pub offset: f64,
    pub k: f64,
    pub regimes: Vec<Regime>,
}

impl Default for ContaminationSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            offset: 0.0,
            k: 100.0,
            regimes: Vec::new(),
        }
    }
}

impl ContaminationSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |eps: f64, k: f64| {
            if !(0.0..1.0).contains(&eps) {
                return Err(Error::Config(format!("contamination rate {eps} outside [0, 1)")));
            }
            if !(k > 1.0) {
                return Err(Error::Config(format!("inflation factor {k} must exceed 1")));
            }
            Ok(())
        };
        check(self.epsilon, self.k)?;
        for r in &self.regimes {
            check(r.epsilon, r.k)?;
        }
        Ok(())
    }

    /// `(epsilon, offset, k)` in force at `epoch`.
    pub fn at(&self, epoch: usize) -> (f64, f64, f64) {
        self.regimes
            .iter()
            .filter(|r| r.start_epoch <= epoch)
            .max_by_key(|r| r.start_epoch)
            .map_or((self.epsilon, self.offset, self.k), |r| (r.epsilon, r.offset, r.k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Prior,
    Between,
    Range,
    Pseudorange,
}

impl ObservationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObservationKind::Prior => "prior",
            ObservationKind::Between => "between",
            ObservationKind::Range => "range",
            ObservationKind::Pseudorange => "pseudorange",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "prior" => ObservationKind::Prior,
            "between" => ObservationKind::Between,
            "range" => ObservationKind::Range,
            "pseudorange" => ObservationKind::Pseudorange,
            _ => return None,
        })
    }

    pub fn is_ranging(self) -> bool {
        matches!(self, ObservationKind::Range | ObservationKind::Pseudorange)
    }
}

/// One raw observation. Between observations connect the previous epoch's
/// state to this epoch's.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub kind: ObservationKind,
    pub anchor_id: Option<usize>,
    pub anchor: Option<DVector<f64>>,
    pub value: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub index: usize,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub k: Option<f64>,
    pub anchors: Vec<Vec<f64>>,
    pub prng: Option<String>,
}

/// Estimator-facing view: observations and ground truth, no outlier labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Position dimension (2 or 3).
    pub position_dim: usize,
    /// State block dimension: position plus clock bias when present.
    pub state_dim: usize,
    pub epochs: Vec<Epoch>,
    /// Full state per epoch; may be empty for replayed data.
    pub truth: Vec<DVector<f64>>,
    pub metadata: DatasetMetadata,
}

impl Dataset {
    pub fn has_clock(&self) -> bool {
        self.state_dim > self.position_dim
    }

    pub fn observation_count(&self) -> usize {
        self.epochs.iter().map(|e| e.observations.len()).sum()
    }
}

/// A dataset plus the generator's contamination labels, aligned with each
/// epoch's observations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dataset: Dataset,
    pub labels: Vec<Vec<bool>>,
}

impl LabeledDataset {
    pub fn outlier_count(&self) -> usize {
        self.labels.iter().flatten().filter(|l| **l).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangingKind {
    Range,
    Pseudorange,
}

/// Noise and geometry of the generated observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSpec {
    pub anchors: Vec<Vec<f64>>,
    pub ranging: RangingKind,
    pub range_std: f64,
    pub odometry_std: f64,
    /// Per-epoch random-walk step of the receiver clock and the odometry
    /// noise on its increment.
    pub clock_std: f64,
    pub prior_std: f64,
}

impl Default for ObservationSpec {
    fn default() -> Self {
        let anchors = (0..8)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 8.0;
                vec![30.0 + 100.0 * a.cos(), 30.0 + 100.0 * a.sin()]
            })
            .collect();
        Self {
            anchors,
            ranging: RangingKind::Pseudorange,
            range_std: 1.0,
            odometry_std: 0.5,
            clock_std: 0.1,
            prior_std: 1.0,
        }
    }
}

/// Rejects anchor sets that cannot fix the state.
pub fn check_observability(anchors: &[Vec<f64>], position_dim: usize, with_clock: bool) -> Result<()> {
    let needed = position_dim + usize::from(with_clock);
    let needed = needed.max(position_dim + 1);
    if anchors.len() < needed {
        return Err(Error::Unobservable(format!(
            "{} anchors, need at least {needed}",
            anchors.len()
        )));
    }
    if anchors.iter().any(|a| a.len() != position_dim) {
        return Err(Error::Unobservable("anchor dimension differs from trajectory".into()));
    }
    let base = &anchors[0];
    let spread = DMatrix::from_fn(anchors.len() - 1, position_dim, |i, j| anchors[i + 1][j] - base[j]);
    let sv = spread.singular_values();
    let top = sv.max();
    let rank = sv.iter().filter(|s| **s > 1e-9 * top.max(1.0)).count();
    if rank < position_dim {
        return Err(Error::Unobservable(format!(
            "anchors span {rank} of {position_dim} dimensions"
        )));
    }
    Ok(())
}

/// Appends a clock-bias random walk to a position trajectory when the
/// ranging kind needs one.
pub fn truth_states(positions: &[DVector<f64>], spec: &ObservationSpec, seed: u64) -> Vec<DVector<f64>> {
    if spec.ranging == RangingKind::Range {
        return positions.to_vec();
    }
    let mut rng = epoch_rng(seed, TRAJECTORY_STREAM + 1);
    let mut bias = 0.0;
    positions
        .iter()
        .enumerate()
        .map(|(t, p)| {
            if t > 0 {
                bias += spec.clock_std * gaussian(&mut rng);
            }
            let mut s = DVector::zeros(p.len() + 1);
            s.rows_mut(0, p.len()).copy_from(p);
            s[p.len()] = bias;
            s
        })
        .collect()
}

/// Draws prior, odometry and ranging observations around `truth`.
pub fn generate_observations(
    truth: &[DVector<f64>],
    spec: &ObservationSpec,
    contamination: &ContaminationSpec,
    seed: u64,
) -> Result<LabeledDataset> {
    contamination.validate()?;
    if truth.is_empty() {
        return Err(Error::Config("empty trajectory".into()));
    }
    let with_clock = spec.ranging == RangingKind::Pseudorange;
    let state_dim = truth[0].len();
    let position_dim = state_dim - usize::from(with_clock);
    check_observability(&spec.anchors, position_dim, with_clock)?;
    for (name, s) in [
        ("range_std", spec.range_std),
        ("odometry_std", spec.odometry_std),
        ("prior_std", spec.prior_std),
    ] {
        if !(s > 0.0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
    }
    if with_clock && !(spec.clock_std > 0.0) {
        return Err(Error::Config("clock_std must be positive for pseudoranges".into()));
    }
    let block_std: Vec<f64> = (0..state_dim)
        .map(|k| if k < position_dim { spec.odometry_std } else { spec.clock_std })
        .collect();
    let odo_cov = DMatrix::from_diagonal(&DVector::from_iterator(state_dim, block_std.iter().map(|s| s * s)));
    let prior_cov = DMatrix::identity(state_dim, state_dim) * spec.prior_std.powi(2);
    let range_cov = DMatrix::from_element(1, 1, spec.range_std.powi(2));
    let anchors: Vec<DVector<f64>> = spec.anchors.iter().map(|a| DVector::from_column_slice(a)).collect();
    let kind = if with_clock {
        ObservationKind::Pseudorange
    } else {
        ObservationKind::Range
    };

    let mut epochs = Vec::with_capacity(truth.len());
    let mut labels = Vec::with_capacity(truth.len());
    for (t, x) in truth.iter().enumerate() {
        let mut rng = epoch_rng(seed, OBSERVATION_STREAM + t as u64);
        let mut obs = Vec::new();
        let mut lab = Vec::new();
        if t == 0 {
            let noise = DVector::from_fn(state_dim, |_, _| spec.prior_std * gaussian(&mut rng));
            obs.push(Observation {
                kind: ObservationKind::Prior,
                anchor_id: None,
                anchor: None,
                value: x + noise,
                cov: prior_cov.clone(),
            });
        } else {
            let noise = DVector::from_fn(state_dim, |k, _| block_std[k] * gaussian(&mut rng));
            obs.push(Observation {
                kind: ObservationKind::Between,
                anchor_id: None,
                anchor: None,
                value: x - &truth[t - 1] + noise,
                cov: odo_cov.clone(),
            });
        }
        lab.push(false);
        let (eps, offset, k) = contamination.at(t);
        for (id, a) in anchors.iter().enumerate() {
            let geometric = (x.rows(0, position_dim) - a).norm();
            let clean = if with_clock { geometric + x[position_dim] } else { geometric };
            let outlier = rng.random::<f64>() < eps;
            let z = gaussian(&mut rng);
            let err = if outlier {
                offset + k.sqrt() * spec.range_std * z
            } else {
                spec.range_std * z
            };
            obs.push(Observation {
                kind,
                anchor_id: Some(id),
                anchor: Some(a.clone()),
                value: DVector::from_element(1, clean + err),
                cov: range_cov.clone(),
            });
            lab.push(outlier);
        }
        epochs.push(Epoch { index: t, observations: obs });
        labels.push(lab);
    }
    Ok(LabeledDataset {
        dataset: Dataset {
            position_dim,
            state_dim,
            epochs,
            truth: truth.to_vec(),
            metadata: DatasetMetadata {
                seed: Some(seed),
                epsilon: Some(contamination.epsilon),
                k: Some(contamination.k),
                anchors: spec.anchors.clone(),
                prng: Some(PRNG.to_string()),
            },
        },
        labels,
    })
}

/// Everything needed to generate one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub epochs: usize,
    pub seed: u64,
    pub trajectory: TrajectoryKind,
    pub observations: ObservationSpec,
    pub contamination: ContaminationSpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            seed: 1,
            trajectory: TrajectoryKind::default(),
            observations: ObservationSpec::default(),
            contamination: ContaminationSpec {
                epsilon: 0.2,
                ..Default::default()
            },
        }
    }
}

pub fn generate_dataset(config: &ScenarioConfig) -> Result<LabeledDataset> {
    let positions = generate_trajectory(&config.trajectory, config.epochs, config.seed)?;
    let truth = truth_states(&positions, &config.observations, config.seed);
    generate_observations(&truth, &config.observations, &config.contamination, config.seed)
}
