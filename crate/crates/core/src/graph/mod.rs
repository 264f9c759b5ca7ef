//! Variables, factors, whitening and the batch Gauss-Newton loop.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianComponent;
use crate::solver::{back_substitute, qr_factorize};

pub mod factors;
mod incremental;

pub use factors::{
    central_difference_jacobians, BetweenMeasurement, LinearMeasurement, Measurement, PriorMeasurement,
    PseudorangeMeasurement, RangeMeasurement,
};
pub use incremental::{solve_incremental, IncrementalConfig, IncrementalSession, KeepTreatments, NoisePolicy};

/// Variable identifier: epoch index plus a name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId {
    pub epoch: usize,
    pub name: String,
}

impl VarId {
    pub fn new(epoch: usize, name: impl Into<String>) -> Self {
        Self {
            epoch,
            name: name.into(),
        }
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.epoch)
    }
}

/// Ordered variable blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateVector {
    ids: Vec<VarId>,
    values: Vec<DVector<f64>>,
    offsets: Vec<usize>,
    index: HashMap<VarId, usize>,
    dim: usize,
}

impl StateVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its index.
    pub fn insert(&mut self, id: VarId, value: DVector<f64>) -> Result<usize> {
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateVariable(id.to_string()));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variable value"));
        }
        let i = self.ids.len();
        self.index.insert(id.clone(), i);
        self.ids.push(id);
        self.offsets.push(self.dim);
        self.dim += value.len();
        self.values.push(value);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Total dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }

    pub fn index_of(&self, id: &VarId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &VarId) -> Option<&DVector<f64>> {
        self.index_of(id).map(|i| &self.values[i])
    }

    pub fn value(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn set_value(&mut self, i: usize, value: DVector<f64>) -> Result<()> {
        if value.len() != self.values[i].len() {
            return Err(Error::DimensionMismatch {
                context: "variable update",
                expected: self.values[i].len(),
                actual: value.len(),
            });
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (v, &o) in self.values.iter().zip(&self.offsets) {
            out.rows_mut(o, v.len()).copy_from(v);
        }
        out
    }

    /// `X ⊕ Δ` (every block is Euclidean).
    pub fn retract(&self, delta: &DVector<f64>) -> Result<StateVector> {
        if delta.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "state increment",
                expected: self.dim,
                actual: delta.len(),
            });
        }
        let mut out = self.clone();
        for (v, &o) in out.values.iter_mut().zip(&self.offsets) {
            let n = v.len();
            *v += delta.rows(o, n);
        }
        Ok(out)
    }

    /// Largest absolute per-entry difference to `other` over shared blocks.
    pub fn max_abs_diff(&self, other: &StateVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Noise attached to a factor. Adaptive factors carry an a-priori
/// covariance that the estimators may replace or reweight.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    Fixed(DMatrix<f64>),
    Adaptive(DMatrix<f64>),
}

impl NoiseModel {
    pub fn covariance(&self) -> &DMatrix<f64> {
        match self {
            NoiseModel::Fixed(c) | NoiseModel::Adaptive(c) => c,
        }
    }
}

/// One factor `ψ_n` with residual `y − h(X)`.
#[derive(Debug, Clone)]
pub struct Factor {
    measurement: Arc<dyn Measurement>,
    keys: Vec<VarId>,
    observed: DVector<f64>,
    noise: NoiseModel,
    apriori: GaussianComponent,
}

impl Factor {
    pub fn new(
        measurement: Arc<dyn Measurement>,
        keys: Vec<VarId>,
        observed: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        let d = measurement.output_dim();
        if observed.len() != d {
            return Err(Error::DimensionMismatch {
                context: "observation vs measurement output",
                expected: d,
                actual: observed.len(),
            });
        }
        if noise.covariance().nrows() != d {
            return Err(Error::DimensionMismatch {
                context: "noise covariance",
                expected: d,
                actual: noise.covariance().nrows(),
            });
        }
        if observed.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation"));
        }
        let apriori = GaussianComponent::centered(noise.covariance().clone())?;
        Ok(Self {
            measurement,
            keys,
            observed,
            noise,
            apriori,
        })
    }

    pub fn prior(key: VarId, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        Self::new(Arc::new(PriorMeasurement { dim }), vec![key], mean, NoiseModel::Fixed(cov))
    }

    pub fn between(from: VarId, to: VarId, delta: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = delta.len();
        Self::new(
            Arc::new(BetweenMeasurement { dim }),
            vec![from, to],
            delta,
            NoiseModel::Fixed(cov),
        )
    }

    pub fn range(key: VarId, anchor: DVector<f64>, range: f64, noise: NoiseModel) -> Result<Self> {
        Self::new(
            Arc::new(RangeMeasurement { anchor }),
            vec![key],
            DVector::from_element(1, range),
            noise,
        )
    }

    pub fn pseudorange(key: VarId, anchor: DVector<f64>, value: f64, noise: NoiseModel) -> Result<Self> {
        Self::new(
            Arc::new(PseudorangeMeasurement { anchor }),
            vec![key],
            DVector::from_element(1, value),
            noise,
        )
    }

    pub fn measurement(&self) -> &dyn Measurement {
        self.measurement.as_ref()
    }

    pub fn keys(&self) -> &[VarId] {
        &self.keys
    }

    pub fn observed(&self) -> &DVector<f64> {
        &self.observed
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self.noise, NoiseModel::Adaptive(_))
    }

    /// Centered Gaussian of the declared covariance.
    pub fn apriori(&self) -> &GaussianComponent {
        &self.apriori
    }

    pub fn dim(&self) -> usize {
        self.observed.len()
    }

    fn blocks<'a>(&self, state: &'a StateVector) -> Result<Vec<&'a DVector<f64>>> {
        self.keys
            .iter()
            .map(|k| state.get(k).ok_or_else(|| Error::MissingVariable(k.to_string())))
            .collect()
    }

    fn evaluate(&self, blocks: &[&DVector<f64>]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let predicted = self.measurement.predict(blocks);
        let residual = &self.observed - predicted;
        if residual.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measurement prediction"));
        }
        let jacobians = self.measurement.jacobians(blocks);
        for (j, b) in jacobians.iter().zip(blocks) {
            if j.nrows() != self.dim() || j.ncols() != b.len() {
                return Err(Error::DimensionMismatch {
                    context: "measurement jacobian",
                    expected: b.len(),
                    actual: j.ncols(),
                });
            }
            if j.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("measurement jacobian"));
            }
        }
        Ok((residual, jacobians))
    }
}

/// New variables (with initial values) and factors arriving at one epoch.
#[derive(Debug, Clone, Default)]
pub struct EpochBatch {
    pub epoch: usize,
    pub variables: Vec<(VarId, DVector<f64>)>,
    pub factors: Vec<Factor>,
}

/// `r = y − h(X)`.
pub fn compute_residual(factor: &Factor, state: &StateVector) -> Result<DVector<f64>> {
    let blocks = factor.blocks(state)?;
    let residual = factor.observed() - factor.measurement.predict(&blocks);
    if residual.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement prediction"));
    }
    Ok(residual)
}

/// Residual whitened by the factor's a-priori covariance, `L_a⁻¹ r`.
pub fn normalized_residual(factor: &Factor, state: &StateVector) -> Result<DVector<f64>> {
    Ok(factor.apriori.whiten(&compute_residual(factor, state)?))
}

/// Whitened linear system row for one factor. Jacobian blocks are stored
/// per connected variable (index into the state).
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedRow {
    pub factor: usize,
    pub blocks: Vec<(usize, DMatrix<f64>)>,
    pub b: DVector<f64>,
}

impl WhitenedRow {
    pub fn rows(&self) -> usize {
        self.b.len()
    }

    /// Dense `a_n` over the whole state.
    pub fn dense_a(&self, state: &StateVector) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows(), state.dim());
        for (var, block) in &self.blocks {
            a.view_mut((0, state.offset(*var)), block.shape()).copy_from(block);
        }
        a
    }

    fn scale(&mut self, s: f64) {
        for (_, block) in &mut self.blocks {
            *block *= s;
        }
        self.b *= s;
    }
}

/// `a = L⁻¹ J`, `b = L⁻¹ (r − μ)` for a component given in raw residual
/// space.
pub fn whiten(factor: &Factor, state: &StateVector, component: &GaussianComponent) -> Result<WhitenedRow> {
    if component.dim() != factor.dim() {
        return Err(Error::DimensionMismatch {
            context: "whitening component",
            expected: factor.dim(),
            actual: component.dim(),
        });
    }
    let blocks = factor.blocks(state)?;
    let (residual, jacobians) = factor.evaluate(&blocks)?;
    Ok(WhitenedRow {
        factor: usize::MAX,
        blocks: factor
            .keys
            .iter()
            .zip(jacobians)
            .map(|(k, j)| (state.index_of(k).expect("checked above"), component.whiten_matrix(&j)))
            .collect(),
        b: component.whiten(&(residual - component.mean())),
    })
}

/// How an estimator wants one factor treated when it is linearized.
///
/// `component` lives in the factor's normalized residual space
/// (`L_a⁻¹ r`); `None` means the a-priori Gaussian alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Treatment {
    pub weight: f64,
    pub component: Option<GaussianComponent>,
}

impl Treatment {
    pub fn nominal() -> Self {
        Self {
            weight: 1.0,
            component: None,
        }
    }

    pub fn weighted(weight: f64) -> Self {
        Self {
            weight,
            component: None,
        }
    }

    pub fn with_component(component: GaussianComponent) -> Self {
        Self {
            weight: 1.0,
            component: Some(component),
        }
    }
}

impl Default for Treatment {
    fn default() -> Self {
        Self::nominal()
    }
}

fn check_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("factor weight {w} outside [0, 1]")));
    }
    Ok(())
}

/// Factors, registered variables and the per-factor treatment cache.
#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    var_ids: Vec<VarId>,
    var_dims: Vec<usize>,
    var_index: HashMap<VarId, usize>,
    factors: Vec<Factor>,
    factor_vars: Vec<Vec<usize>>,
    treatments: Vec<Treatment>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, id: VarId, dim: usize) -> Result<usize> {
        if self.var_index.contains_key(&id) {
            return Err(Error::DuplicateVariable(id.to_string()));
        }
        let i = self.var_ids.len();
        self.var_index.insert(id.clone(), i);
        self.var_ids.push(id);
        self.var_dims.push(dim);
        Ok(i)
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<usize> {
        self.add_factor_with(factor, Treatment::nominal())
    }

    pub fn add_factor_with(&mut self, factor: Factor, treatment: Treatment) -> Result<usize> {
        let vars = factor
            .keys
            .iter()
            .map(|k| {
                self.var_index
                    .get(k)
                    .copied()
                    .ok_or_else(|| Error::MissingVariable(k.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let dims: Vec<usize> = vars.iter().map(|&v| self.var_dims[v]).collect();
        factor.measurement.check_blocks(&dims)?;
        self.check_treatment(&factor, &treatment)?;
        self.factors.push(factor);
        self.factor_vars.push(vars);
        self.treatments.push(treatment);
        Ok(self.factors.len() - 1)
    }

    fn check_treatment(&self, factor: &Factor, t: &Treatment) -> Result<()> {
        check_weight(t.weight)?;
        if let Some(c) = &t.component {
            if c.dim() != factor.dim() {
                return Err(Error::DimensionMismatch {
                    context: "treatment component",
                    expected: factor.dim(),
                    actual: c.dim(),
                });
            }
        }
        Ok(())
    }

    pub fn set_treatment(&mut self, i: usize, treatment: Treatment) -> Result<()> {
        self.check_treatment(&self.factors[i], &treatment)?;
        self.treatments[i] = treatment;
        Ok(())
    }

    pub fn treatment(&self, i: usize) -> &Treatment {
        &self.treatments[i]
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor(&self, i: usize) -> &Factor {
        &self.factors[i]
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn num_variables(&self) -> usize {
        self.var_ids.len()
    }

    pub fn variables(&self) -> &[VarId] {
        &self.var_ids
    }

    /// Total dimension of all registered variables.
    pub fn dim(&self) -> usize {
        self.var_dims.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Checks that `state` holds exactly the registered variables, in order.
    pub fn check_state(&self, state: &StateVector) -> Result<()> {
        if state.ids() != self.var_ids.as_slice() {
            return Err(Error::DimensionMismatch {
                context: "state blocks vs graph variables",
                expected: self.var_ids.len(),
                actual: state.len(),
            });
        }
        for (i, &d) in self.var_dims.iter().enumerate() {
            if state.value(i).len() != d {
                return Err(Error::DimensionMismatch {
                    context: "variable dimension",
                    expected: d,
                    actual: state.value(i).len(),
                });
            }
        }
        Ok(())
    }

    fn factor_blocks<'a>(&self, i: usize, state: &'a StateVector) -> Vec<&'a DVector<f64>> {
        self.factor_vars[i].iter().map(|&v| state.value(v)).collect()
    }

    /// Raw residual of factor `i`; `state` must match the graph layout.
    pub(crate) fn residual_of(&self, i: usize, state: &StateVector) -> Result<DVector<f64>> {
        let blocks = self.factor_blocks(i, state);
        let f = &self.factors[i];
        let r = f.observed() - f.measurement.predict(&blocks);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measurement prediction"));
        }
        Ok(r)
    }

    pub(crate) fn normalized_residual_of(&self, i: usize, state: &StateVector) -> Result<DVector<f64>> {
        Ok(self.factors[i].apriori.whiten(&self.residual_of(i, state)?))
    }

    /// Whitened row of factor `i` under treatment `t`, or `None` when the
    /// weight is zero.
    pub(crate) fn linearize_with(&self, i: usize, state: &StateVector, t: &Treatment) -> Result<Option<WhitenedRow>> {
        if t.weight == 0.0 {
            return Ok(None);
        }
        let f = &self.factors[i];
        let blocks = self.factor_blocks(i, state);
        let (residual, jacobians) = f.evaluate(&blocks)?;
        let mut b = f.apriori.whiten(&residual);
        let mut mats: Vec<DMatrix<f64>> = jacobians.iter().map(|j| f.apriori.whiten_matrix(j)).collect();
        if let Some(c) = &t.component {
            b = c.whiten(&(b - c.mean()));
            for m in &mut mats {
                *m = c.whiten_matrix(m);
            }
        }
        let mut row = WhitenedRow {
            factor: i,
            blocks: self.factor_vars[i].iter().copied().zip(mats).collect(),
            b,
        };
        if t.weight != 1.0 {
            row.scale(t.weight.sqrt());
        }
        Ok(Some(row))
    }

    pub fn linearize_factor(&self, i: usize, state: &StateVector) -> Result<Option<WhitenedRow>> {
        self.check_state(state)?;
        self.linearize_with(i, state, &self.treatments[i])
    }

    /// Rows for every factor under the cached treatments.
    pub fn linearize(&self, state: &StateVector) -> Result<Vec<WhitenedRow>> {
        self.check_state(state)?;
        let mut rows = Vec::with_capacity(self.factors.len());
        for i in 0..self.factors.len() {
            if let Some(r) = self.linearize_with(i, state, &self.treatments[i])? {
                rows.push(r);
            }
        }
        Ok(rows)
    }

    /// `Σ w_n ‖b_n‖²` under the cached treatments.
    pub fn cost(&self, state: &StateVector) -> Result<f64> {
        self.check_state(state)?;
        let mut total = 0.0;
        for (i, t) in self.treatments.iter().enumerate() {
            if t.weight == 0.0 {
                continue;
            }
            let mut b = self.normalized_residual_of(i, state)?;
            if let Some(c) = &t.component {
                b = c.whiten(&(b - c.mean()));
            }
            total += t.weight * b.norm_squared();
        }
        Ok(total)
    }

    /// Stacks rows into a dense `(A, b)` pair.
    pub fn dense_system(&self, rows: &[WhitenedRow], state: &StateVector) -> (DMatrix<f64>, DVector<f64>) {
        let n: usize = rows.iter().map(WhitenedRow::rows).sum();
        let mut a = DMatrix::zeros(n, state.dim());
        let mut b = DVector::zeros(n);
        let mut at = 0;
        for row in rows {
            for (var, block) in &row.blocks {
                a.view_mut((at, state.offset(*var)), block.shape()).copy_from(block);
            }
            b.rows_mut(at, row.rows()).copy_from(&row.b);
            at += row.rows();
        }
        (a, b)
    }
}

/// Rows under the graph's cached components but with the given robust
/// weights; weight-zero factors are omitted.
pub fn linearize_all(graph: &FactorGraph, state: &StateVector, weights: &[f64]) -> Result<Vec<WhitenedRow>> {
    if weights.len() != graph.num_factors() {
        return Err(Error::DimensionMismatch {
            context: "per-factor weights",
            expected: graph.num_factors(),
            actual: weights.len(),
        });
    }
    graph.check_state(state)?;
    let mut rows = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        check_weight(w)?;
        let t = Treatment {
            weight: w,
            component: graph.treatments[i].component.clone(),
        };
        if let Some(r) = graph.linearize_with(i, state, &t)? {
            rows.push(r);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub max_iterations: usize,
    /// Stop once `‖Δ‖` falls below this.
    pub tolerance: f64,
    pub max_step_halvings: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-10,
            max_step_halvings: 5,
        }
    }
}

/// One undamped Gauss-Newton increment at `state`.
pub fn solve_linear_step(graph: &FactorGraph, state: &StateVector) -> Result<DVector<f64>> {
    let rows = graph.linearize(state)?;
    let (a, b) = graph.dense_system(&rows, state);
    if a.nrows() < a.ncols() {
        // fewer whitened rows than unknowns: some column has no pivot
        return Err(Error::Singular {
            column: a.nrows(),
            value: 0.0,
            tolerance: 0.0,
        });
    }
    back_substitute(&qr_factorize(&a, &b)?)
}

/// Batch Gauss-Newton from `init` with the cost-increase guard.
pub fn solve_batch(graph: &FactorGraph, init: &StateVector, config: &BatchConfig) -> Result<StateVector> {
    if graph.is_empty() {
        return Err(Error::EmptyModel);
    }
    let mut state = init.clone();
    let mut cost = graph.cost(&state)?;
    for iteration in 0..config.max_iterations {
        let delta = solve_linear_step(graph, &state)?;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_step_halvings {
            let candidate = state.retract(&(&delta * step))?;
            let c = graph.cost(&candidate)?;
            if c <= cost * (1.0 + 1e-12) + 1e-300 {
                accepted = Some((candidate, c));
                break;
            }
            step *= 0.5;
        }
        let converged = delta.norm() < config.tolerance;
        match accepted {
            Some((next, c)) => {
                state = next;
                cost = c;
            }
            None if converged => break,
            None => return Err(Error::Diverged { iterations: iteration + 1, cost }),
        }
        if converged {
            break;
        }
    }
    Ok(state)
}
