//! Gaussian mixtures used as measurement-uncertainty models.
//!
//! Components are immutable once built: the Cholesky factor and log
//! determinant are computed at construction so max-mixture selection over a
//! stream of residuals costs one triangular solve per component.

mod variational;

pub use variational::{fit_mixture_variational, MixtureFit, VariationalConfig};

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance on the sum of mixture weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// One weighted Gaussian `w · N(μ, Λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0 + WEIGHT_SUM_TOLERANCE) {
            return Err(Error::Config(format!("component weight {weight} outside (0, 1]")));
        }
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "component covariance",
                expected: d,
                actual: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("component parameters"));
        }
        let cov = symmetrize(&cov);
        let chol = cholesky_lower(&cov, "component covariance")?;
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            weight: weight.min(1.0),
            mean,
            cov,
            chol,
            log_det,
        })
    }

    /// Zero-mean component with the given covariance and weight 1.
    pub fn centered(cov: DMatrix<f64>) -> Result<Self> {
        let d = cov.nrows();
        Self::new(1.0, DVector::zeros(d), cov)
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self::centered(DMatrix::identity(d, d)).expect("identity is SPD")
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor `L` with `Λ = L Lᵀ`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn with_weight(&self, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0 + WEIGHT_SUM_TOLERANCE) {
            return Err(Error::Config(format!("component weight {weight} outside (0, 1]")));
        }
        let mut out = self.clone();
        out.weight = weight.min(1.0);
        Ok(out)
    }

    /// `L⁻¹ v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        forward_substitute(&self.chol, v)
    }

    /// `L⁻¹ M` applied column by column.
    pub fn whiten_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for mut col in out.column_iter_mut() {
            let w = forward_substitute(&self.chol, &col.clone_owned());
            col.copy_from(&w);
        }
        out
    }

    /// Squared Mahalanobis distance `(r − μ)ᵀ Λ⁻¹ (r − μ)`.
    pub fn mahalanobis_sq(&self, r: &DVector<f64>) -> Result<f64> {
        self.check_dim(r)?;
        Ok(self.whiten(&(r - &self.mean)).norm_squared())
    }

    fn check_dim(&self, r: &DVector<f64>) -> Result<()> {
        if r.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "residual vs component",
                expected: self.dim(),
                actual: r.len(),
            });
        }
        Ok(())
    }
}

/// `ln w + ln N(r; μ, Λ)`.
pub fn component_log_density(comp: &GaussianComponent, r: &DVector<f64>) -> Result<f64> {
    let m = comp.mahalanobis_sq(r)?;
    let d = comp.dim() as f64;
    Ok(comp.weight.ln() - 0.5 * d * (2.0 * PI).ln() - 0.5 * comp.log_det - 0.5 * m)
}

/// A weighted set of components plus the number of residuals it has
/// characterized so far.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    components: Vec<GaussianComponent>,
    support_count: u64,
}

impl MixtureModel {
    pub fn new(components: Vec<GaussianComponent>, support_count: u64) -> Result<Self> {
        let first = components.first().ok_or(Error::EmptyModel)?;
        let d = first.dim();
        if let Some(bad) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch {
                context: "mixture component dimension",
                expected: d,
                actual: bad.dim(),
            });
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::Config(format!("mixture weights sum to {total}")));
        }
        Ok(Self {
            components,
            support_count,
        })
    }

    /// Builds a model after renormalizing the weights to sum to one.
    pub fn normalized(components: Vec<(f64, DVector<f64>, DMatrix<f64>)>, support_count: u64) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.0).sum();
        if !(total > 0.0) {
            return Err(Error::EmptyModel);
        }
        let comps = components
            .into_iter()
            .map(|(w, m, c)| GaussianComponent::new(w / total, m, c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps, support_count)
    }

    /// Single zero-mean component; the a-priori model in normalized residual space.
    pub fn single(component: GaussianComponent, support_count: u64) -> Result<Self> {
        Self::new(vec![component.with_weight(1.0)?], support_count)
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn support_count(&self) -> u64 {
        self.support_count
    }

    pub fn set_support_count(&mut self, n: u64) {
        self.support_count = n;
    }

    pub fn add_support(&mut self, n: u64) {
        self.support_count += n;
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// Index of the component maximizing `w_m N(r | θ_m)`; ties go to the
    /// lowest index.
    pub fn max_mix_select(&self, r: &DVector<f64>) -> Result<usize> {
        max_mix_select(self, r)
    }
}

/// Max-mixture component selection.
pub fn max_mix_select(model: &MixtureModel, r: &DVector<f64>) -> Result<usize> {
    if model.components.is_empty() {
        return Err(Error::EmptyModel);
    }
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, comp) in model.components.iter().enumerate() {
        let v = component_log_density(comp, r)?;
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    Ok(best)
}

#[derive(Serialize, Deserialize)]
struct ComponentRepr {
    w: f64,
    mu: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    components: Vec<ComponentRepr>,
    support_count: u64,
}

impl From<&GaussianComponent> for ComponentRepr {
    fn from(c: &GaussianComponent) -> Self {
        ComponentRepr {
            w: c.weight,
            mu: c.mean.iter().copied().collect(),
            cov: c.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl Serialize for MixtureModel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ModelRepr {
            components: self.components.iter().map(ComponentRepr::from).collect(),
            support_count: self.support_count,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MixtureModel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = ModelRepr::deserialize(d)?;
        let comps = repr
            .components
            .into_iter()
            .map(|c| {
                let dim = c.mu.len();
                if c.cov.len() != dim || c.cov.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config("covariance shape does not match mean".into()));
                }
                let cov = DMatrix::from_fn(dim, dim, |i, j| c.cov[i][j]);
                GaussianComponent::new(c.w, DVector::from_vec(c.mu), cov)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        MixtureModel::new(comps, repr.support_count).map_err(D::Error::custom)
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn cholesky_lower(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.l())
        .filter(|l| l.diagonal().iter().all(|v| *v > 0.0 && v.is_finite()))
        .ok_or(Error::NotPositiveDefinite { context })
}

pub(crate) fn forward_substitute(l: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let mut acc = v[i];
        for j in 0..i {
            acc -= l[(i, j)] * out[j];
        }
        out[i] = acc / l[(i, i)];
    }
    out
}

/// Symmetric eigenvalue floor; keeps a covariance SPD after round-off.
pub(crate) fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().all(|v| *v >= floor) {
        return symmetrize(m);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&clamped) * q.transpose()))
}
