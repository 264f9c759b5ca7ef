use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Factor, FactorGraph, StateVector, Treatment, VarId, WhitenedRow};
use crate::error::Result;
use crate::solver::SquareRootSystem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncrementalConfig {
    /// Full relinearization after this many updates.
    pub relinearize_every: usize,
    /// Also relinearize once any entry drifts this far from its
    /// linearization point.
    pub relinearize_threshold: Option<f64>,
}

impl Default for IncrementalConfig {
    fn default() -> Self {
        Self {
            relinearize_every: 10,
            relinearize_threshold: None,
        }
    }
}

/// Re-decides the treatment of adaptive factors when the session
/// relinearizes.
pub trait NoisePolicy {
    fn relinearized(&mut self, _factor: &Factor, _normalized_residual: &DVector<f64>, current: &Treatment) -> Result<Treatment> {
        Ok(current.clone())
    }
}

/// Leaves every treatment as it is.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeepTreatments;

impl NoisePolicy for KeepTreatments {}

/// Incremental smoother: rows are folded into a square-root system at a
/// fixed linearization point, with periodic full re-factorization.
#[derive(Debug, Clone)]
pub struct IncrementalSession {
    graph: FactorGraph,
    linearization: StateVector,
    estimate: StateVector,
    system: SquareRootSystem,
    work: Vec<f64>,
    entries: Vec<(usize, f64)>,
    config: IncrementalConfig,
    pending: bool,
    updates_since_relinearization: usize,
    relinearizations: usize,
    relinearized_last: bool,
}

impl IncrementalSession {
    pub fn new(config: IncrementalConfig) -> Self {
        Self {
            graph: FactorGraph::new(),
            linearization: StateVector::new(),
            estimate: StateVector::new(),
            system: SquareRootSystem::zeros(0),
            work: Vec::new(),
            entries: Vec::new(),
            config,
            pending: false,
            updates_since_relinearization: 0,
            relinearizations: 0,
            relinearized_last: false,
        }
    }

    pub fn config(&self) -> &IncrementalConfig {
        &self.config
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn estimate(&self) -> &StateVector {
        &self.estimate
    }

    pub fn linearization_point(&self) -> &StateVector {
        &self.linearization
    }

    pub fn system(&self) -> &SquareRootSystem {
        &self.system
    }

    pub fn relinearization_count(&self) -> usize {
        self.relinearizations
    }

    /// Whether the most recent [`finish_update`](Self::finish_update)
    /// re-factorized the whole graph.
    pub fn relinearized_last_update(&self) -> bool {
        self.relinearized_last
    }

    /// Registers a variable; `init` becomes its linearization point.
    pub fn add_variable(&mut self, id: VarId, init: DVector<f64>) -> Result<()> {
        let dim = init.len();
        self.graph.add_variable(id.clone(), dim)?;
        self.linearization.insert(id.clone(), init.clone())?;
        self.estimate.insert(id, init)?;
        self.system.grow(dim);
        self.work.resize(self.system.dim(), 0.0);
        self.pending = true;
        Ok(())
    }

    /// Adds a factor and folds its row at the current linearization point.
    pub fn add_factor(&mut self, factor: Factor, treatment: Treatment) -> Result<usize> {
        let i = self.graph.add_factor_with(factor, treatment)?;
        let row = self
            .graph
            .linearize_with(i, &self.linearization, &self.graph.treatments[i])?;
        if let Some(row) = row {
            self.fold(&row)?;
        }
        self.pending = true;
        Ok(i)
    }

    /// Changes a factor's treatment. The folded system keeps the old row
    /// until the next relinearization.
    pub fn set_treatment(&mut self, i: usize, treatment: Treatment) -> Result<()> {
        self.graph.set_treatment(i, treatment)
    }

    fn fold(&mut self, row: &WhitenedRow) -> Result<()> {
        for r in 0..row.rows() {
            self.entries.clear();
            for (var, block) in &row.blocks {
                let offset = self.linearization.offset(*var);
                for c in 0..block.ncols() {
                    let v = block[(r, c)];
                    if v != 0.0 {
                        self.entries.push((offset + c, v));
                    }
                }
            }
            self.entries.sort_unstable_by_key(|e| e.0);
            self.system.fold_sparse(&self.entries, row.b[r], &mut self.work)?;
        }
        Ok(())
    }

    fn back_substitute(&mut self) -> Result<()> {
        let delta = self.system.solve()?;
        self.estimate = self.linearization.retract(&delta)?;
        Ok(())
    }

    /// Solves after a batch of additions and relinearizes when due.
    pub fn finish_update(&mut self, policy: &mut dyn NoisePolicy) -> Result<&StateVector> {
        self.relinearized_last = false;
        if !self.pending {
            return Ok(&self.estimate);
        }
        self.pending = false;
        self.back_substitute()?;
        self.updates_since_relinearization += 1;
        if self.updates_since_relinearization >= self.config.relinearize_every.max(1)
            || self
                .config
                .relinearize_threshold
                .is_some_and(|t| self.estimate.max_abs_diff(&self.linearization) > t)
        {
            self.relinearize(policy)?;
        }
        Ok(&self.estimate)
    }

    /// Adds variables and factors, then solves.
    pub fn update(
        &mut self,
        variables: Vec<(VarId, DVector<f64>)>,
        factors: Vec<(Factor, Treatment)>,
        policy: &mut dyn NoisePolicy,
    ) -> Result<StateVector> {
        for (id, init) in variables {
            self.add_variable(id, init)?;
        }
        for (f, t) in factors {
            self.add_factor(f, t)?;
        }
        Ok(self.finish_update(policy)?.clone())
    }

    /// Moves the linearization point to the current estimate, lets the
    /// policy revisit adaptive factors and re-factorizes from scratch.
    pub fn relinearize(&mut self, policy: &mut dyn NoisePolicy) -> Result<()> {
        self.linearization = self.estimate.clone();
        for i in 0..self.graph.num_factors() {
            if !self.graph.factors[i].is_adaptive() {
                continue;
            }
            let r = self.graph.normalized_residual_of(i, &self.linearization)?;
            let t = policy.relinearized(&self.graph.factors[i], &r, &self.graph.treatments[i])?;
            self.graph.set_treatment(i, t)?;
        }
        self.system = SquareRootSystem::zeros(self.linearization.dim());
        self.work = vec![0.0; self.system.dim()];
        for i in 0..self.graph.num_factors() {
            if let Some(row) = self
                .graph
                .linearize_with(i, &self.linearization, &self.graph.treatments[i])?
            {
                self.fold(&row)?;
            }
        }
        self.back_substitute()?;
        self.updates_since_relinearization = 0;
        self.relinearizations += 1;
        self.relinearized_last = true;
        Ok(())
    }
}

/// Appends variables and nominally-treated factors, then solves.
pub fn solve_incremental(
    session: &mut IncrementalSession,
    variables: Vec<(VarId, DVector<f64>)>,
    factors: Vec<Factor>,
) -> Result<StateVector> {
    if variables.is_empty() && factors.is_empty() {
        return Ok(session.estimate().clone());
    }
    let factors = factors.into_iter().map(|f| (f, Treatment::nominal())).collect();
    session.update(variables, factors, &mut KeepTreatments)
}
