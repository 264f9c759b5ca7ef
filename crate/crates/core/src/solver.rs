//! Dense square-root information kernel.
//!
//! A whitened least-squares problem `min ‖A x − b‖²` is held as an
//! upper-triangular factor `R`, a right-hand side `c` and the constant
//! `‖d‖²` left over after the orthogonal reduction, so that
//!
//! ```text
//! ‖A x − b‖² = ‖R x − c‖² + ‖d‖²   for every x.
//! ```
//!
//! `Q` is never stored. Rows of `R` are kept as contiguous segments starting
//! at the diagonal and ending at the last column that has ever been filled,
//! which keeps banded problems (chains of epochs) cheap to update while the
//! factor itself stays a plain dense triangle.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance below which a diagonal entry of `R` counts as zero.
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

/// Upper-triangular `R`, right-hand side `c` and residual constant `‖d‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareRootSystem {
    // rows[j][k] holds R[j, j + k]
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    residual_norm_sq: f64,
}

impl SquareRootSystem {
    /// An empty system of the given dimension (all of `R` zero).
    pub fn zeros(dim: usize) -> Self {
        Self {
            rows: vec![Vec::new(); dim],
            rhs: vec![0.0; dim],
            residual_norm_sq: 0.0,
        }
    }

    /// Builds a system from an explicit upper-triangular matrix.
    pub fn from_dense(r: &DMatrix<f64>, c: &DVector<f64>, residual_norm_sq: f64) -> Result<Self> {
        let m = r.nrows();
        if r.ncols() != m {
            return Err(Error::DimensionMismatch {
                context: "square-root factor columns",
                expected: m,
                actual: r.ncols(),
            });
        }
        if c.len() != m {
            return Err(Error::DimensionMismatch {
                context: "square-root rhs",
                expected: m,
                actual: c.len(),
            });
        }
        let mut rows = Vec::with_capacity(m);
        for i in 0..m {
            for j in 0..i {
                if r[(i, j)] != 0.0 {
                    return Err(Error::Config(format!(
                        "factor is not upper triangular at ({i}, {j})"
                    )));
                }
            }
            rows.push((i..m).map(|j| r[(i, j)]).collect());
        }
        if !residual_norm_sq.is_finite() || residual_norm_sq < 0.0 {
            return Err(Error::NonFinite("residual norm"));
        }
        Ok(Self {
            rows,
            rhs: c.iter().copied().collect(),
            residual_norm_sq,
        })
    }

    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    /// Entry `R[i, j]`.
    pub fn r_at(&self, i: usize, j: usize) -> f64 {
        if j < i {
            return 0.0;
        }
        self.rows[i].get(j - i).copied().unwrap_or(0.0)
    }

    pub fn r(&self) -> DMatrix<f64> {
        let m = self.dim();
        DMatrix::from_fn(m, m, |i, j| self.r_at(i, j))
    }

    pub fn c(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.rhs)
    }

    /// The `‖d‖²` constant.
    pub fn residual_norm_sq(&self) -> f64 {
        self.residual_norm_sq
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|row| row.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Number of stored entries of `R`.
    pub fn stored_entries(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Appends `extra` new (unconstrained) variables.
    pub fn grow(&mut self, extra: usize) {
        self.rows.extend(std::iter::repeat_with(Vec::new).take(extra));
        self.rhs.extend(std::iter::repeat_n(0.0, extra));
    }

    /// Folds one dense row into the factor with Givens rotations.
    ///
    /// `work` must have length `dim()`; it is left zeroed on return.
    pub fn fold_row(&mut self, work: &mut [f64], rhs: f64) -> Result<()> {
        if work.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "givens row length",
                expected: self.dim(),
                actual: work.len(),
            });
        }
        let lo = work.iter().position(|v| *v != 0.0);
        let hi = work.iter().rposition(|v| *v != 0.0);
        match (lo, hi) {
            (Some(lo), Some(hi)) => self.fold_span(work, lo, hi, rhs),
            _ => self.residual_norm_sq += rhs * rhs,
        }
        Ok(())
    }

    /// Folds a sparse row given as `(column, value)` pairs.
    ///
    /// `work` is caller-provided scratch of length `dim()` that must be zero
    /// on entry; it is zero again on return.
    pub fn fold_sparse(&mut self, entries: &[(usize, f64)], rhs: f64, work: &mut [f64]) -> Result<()> {
        if work.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "givens scratch length",
                expected: self.dim(),
                actual: work.len(),
            });
        }
        let mut lo = usize::MAX;
        let mut hi = 0;
        for &(col, v) in entries {
            if col >= self.dim() {
                return Err(Error::DimensionMismatch {
                    context: "givens column index",
                    expected: self.dim(),
                    actual: col,
                });
            }
            if v != 0.0 {
                work[col] += v;
                lo = lo.min(col);
                hi = hi.max(col);
            }
        }
        if lo == usize::MAX {
            self.residual_norm_sq += rhs * rhs;
        } else {
            self.fold_span(work, lo, hi, rhs);
        }
        Ok(())
    }

    fn fold_span(&mut self, work: &mut [f64], lo: usize, mut hi: usize, mut rhs: f64) {
        let mut j = lo;
        while j <= hi {
            let x = work[j];
            if x != 0.0 {
                let row = &mut self.rows[j];
                let rjj = row.first().copied().unwrap_or(0.0);
                let r = rjj.hypot(x);
                let (cs, sn) = (rjj / r, x / r);
                let end = if row.is_empty() { hi } else { (j + row.len() - 1).max(hi) };
                if row.len() < end - j + 1 {
                    row.resize(end - j + 1, 0.0);
                }
                for (k, rv) in row.iter_mut().enumerate() {
                    let a = *rv;
                    let b = work[j + k];
                    *rv = cs * a + sn * b;
                    work[j + k] = -sn * a + cs * b;
                }
                row[0] = r;
                work[j] = 0.0;
                let cj = self.rhs[j];
                self.rhs[j] = cs * cj + sn * rhs;
                rhs = -sn * cj + cs * rhs;
                hi = end;
            }
            j += 1;
        }
        self.residual_norm_sq += rhs * rhs;
    }

    /// Solves `R x = c`.
    pub fn solve(&self) -> Result<DVector<f64>> {
        let m = self.dim();
        let tol = SINGULAR_TOLERANCE * self.max_abs();
        let mut x = DVector::zeros(m);
        for i in (0..m).rev() {
            let row = &self.rows[i];
            let rii = row.first().copied().unwrap_or(0.0);
            if rii.abs() <= tol || rii == 0.0 {
                return Err(Error::Singular {
                    column: i,
                    value: rii,
                    tolerance: tol,
                });
            }
            let mut acc = self.rhs[i];
            for (k, rv) in row.iter().enumerate().skip(1) {
                acc -= rv * x[i + k];
            }
            x[i] = acc / rii;
        }
        Ok(x)
    }

    /// `‖R x − c‖²`.
    pub fn reduced_cost(&self, x: &DVector<f64>) -> f64 {
        (0..self.dim())
            .map(|i| {
                let row = &self.rows[i];
                let rx: f64 = row.iter().enumerate().map(|(k, v)| v * x[i + k]).sum();
                (rx - self.rhs[i]).powi(2)
            })
            .sum()
    }
}

/// Householder QR of the stacked whitened system `A x ≈ b`.
///
/// Returns `(R, c, ‖d‖²)` with a nonnegative diagonal. Fails if `A` has fewer
/// rows than columns or a diagonal of `R` falls below the relative
/// singularity tolerance.
pub fn qr_factorize(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<SquareRootSystem> {
    let (n, m) = a.shape();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            context: "qr rhs length",
            expected: n,
            actual: b.len(),
        });
    }
    if n < m {
        return Err(Error::DimensionMismatch {
            context: "qr needs at least as many rows as columns",
            expected: m,
            actual: n,
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("qr input"));
    }
    let mut w = a.clone();
    let mut y = b.clone();
    let mut v = vec![0.0; n];
    for k in 0..m {
        let norm = (k..n).map(|i| w[(i, k)].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if w[(k, k)] > 0.0 { -norm } else { norm };
        for i in k..n {
            v[i] = w[(i, k)];
        }
        v[k] -= alpha;
        let vnorm_sq: f64 = (k..n).map(|i| v[i] * v[i]).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        for j in k..m {
            let dot: f64 = (k..n).map(|i| v[i] * w[(i, j)]).sum();
            let f = 2.0 * dot / vnorm_sq;
            for i in k..n {
                w[(i, j)] -= f * v[i];
            }
        }
        let dot: f64 = (k..n).map(|i| v[i] * y[i]).sum();
        let f = 2.0 * dot / vnorm_sq;
        for i in k..n {
            y[i] -= f * v[i];
        }
        for i in (k + 1)..n {
            w[(i, k)] = 0.0;
        }
    }
    let mut rows = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    for i in 0..m {
        let sign = if w[(i, i)] < 0.0 { -1.0 } else { 1.0 };
        rows.push((i..m).map(|j| sign * w[(i, j)]).collect::<Vec<_>>());
        rhs.push(sign * y[i]);
    }
    let residual_norm_sq = (m..n).map(|i| y[i] * y[i]).sum();
    let sys = SquareRootSystem {
        rows,
        rhs,
        residual_norm_sq,
    };
    let tol = SINGULAR_TOLERANCE * sys.max_abs();
    for i in 0..m {
        let d = sys.r_at(i, i);
        if d <= tol || d == 0.0 {
            return Err(Error::Singular {
                column: i,
                value: d,
                tolerance: tol,
            });
        }
    }
    Ok(sys)
}

/// Appends `new_rows` (with right-hand side `new_rhs`) and restores the
/// triangular form with Givens rotations.
pub fn givens_augment(
    mut sys: SquareRootSystem,
    new_rows: &DMatrix<f64>,
    new_rhs: &DVector<f64>,
) -> Result<SquareRootSystem> {
    if new_rows.ncols() != sys.dim() {
        return Err(Error::DimensionMismatch {
            context: "augment columns",
            expected: sys.dim(),
            actual: new_rows.ncols(),
        });
    }
    if new_rhs.len() != new_rows.nrows() {
        return Err(Error::DimensionMismatch {
            context: "augment rhs length",
            expected: new_rows.nrows(),
            actual: new_rhs.len(),
        });
    }
    let mut work = vec![0.0; sys.dim()];
    for i in 0..new_rows.nrows() {
        for (j, w) in work.iter_mut().enumerate() {
            *w = new_rows[(i, j)];
        }
        sys.fold_row(&mut work, new_rhs[i])?;
    }
    Ok(sys)
}

/// Solves `R x = c` by back substitution.
pub fn back_substitute(sys: &SquareRootSystem) -> Result<DVector<f64>> {
    sys.solve()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_factorizes_to_itself() {
        let sys = qr_factorize(&DMatrix::identity(2, 2), &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_relative_eq!(sys.r(), DMatrix::identity(2, 2), epsilon = 1e-15);
        assert_relative_eq!(sys.c(), DVector::from_vec(vec![1.0, 2.0]), epsilon = 1e-15);
        assert_eq!(sys.residual_norm_sq(), 0.0);
    }

    #[test]
    fn duplicate_row_factorizes_to_sqrt_two() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let sys = qr_factorize(&a, &b).unwrap();
        assert_relative_eq!(sys.r_at(0, 0), 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(sys.c()[0], 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(back_substitute(&sys).unwrap()[0], 1.0, epsilon = 1e-15);
        assert!(sys.residual_norm_sq() < 1e-30);
    }

    #[test]
    fn qr_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 8, 3);
        let b = random_vector(&mut rng, 8);
        let sys = qr_factorize(&a, &b).unwrap();
        let x = back_substitute(&sys).unwrap();
        let normal = (a.transpose() * &a).lu().solve(&(a.transpose() * &b)).unwrap();
        assert_relative_eq!(x, normal, epsilon = 1e-9);
        for i in 0..3 {
            assert!(sys.r_at(i, i) > 0.0);
        }
    }

    #[test]
    fn rank_deficient_names_column() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        match qr_factorize(&a, &b) {
            Err(Error::Singular { column, .. }) => assert_eq!(column, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_rows_rejected() {
        let a = DMatrix::<f64>::identity(1, 2);
        assert!(qr_factorize(&a, &DVector::zeros(1)).is_err());
    }

    #[test]
    fn augment_duplicate_row() {
        let sys = SquareRootSystem::from_dense(
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 1.0),
            0.0,
        )
        .unwrap();
        let sys = givens_augment(sys, &DMatrix::from_element(1, 1, 1.0), &DVector::from_element(1, 1.0)).unwrap();
        assert_relative_eq!(sys.r_at(0, 0), 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(sys.c()[0], 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(back_substitute(&sys).unwrap()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn augment_zero_row_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 6, 4);
        let b = random_vector(&mut rng, 6);
        let sys = qr_factorize(&a, &b).unwrap();
        let after = givens_augment(sys.clone(), &DMatrix::zeros(1, 4), &DVector::zeros(1)).unwrap();
        assert_eq!(sys, after);
    }

    #[test]
    fn augment_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_matrix(&mut rng, 5, 5);
        let base_rhs = random_vector(&mut rng, 5);
        let extra = random_matrix(&mut rng, 3, 5);
        let extra_rhs = random_vector(&mut rng, 3);
        let sys = qr_factorize(&base, &base_rhs).unwrap();
        let inc = givens_augment(sys, &extra, &extra_rhs).unwrap();

        let stacked = DMatrix::from_fn(8, 5, |i, j| if i < 5 { base[(i, j)] } else { extra[(i - 5, j)] });
        let stacked_rhs = DVector::from_fn(8, |i, _| if i < 5 { base_rhs[i] } else { extra_rhs[i - 5] });
        let batch = qr_factorize(&stacked, &stacked_rhs).unwrap();
        assert_relative_eq!(inc.r(), batch.r(), epsilon = 1e-9);
        assert_relative_eq!(inc.c(), batch.c(), epsilon = 1e-9);
        assert_relative_eq!(inc.residual_norm_sq(), batch.residual_norm_sq(), epsilon = 1e-9);
    }

    #[test]
    fn augment_rejects_wrong_width() {
        let sys = SquareRootSystem::zeros(3);
        assert!(givens_augment(sys, &DMatrix::zeros(1, 2), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn back_substitution_examples() {
        let sys = SquareRootSystem::from_dense(&DMatrix::identity(2, 2), &DVector::from_vec(vec![3.0, 4.0]), 0.0).unwrap();
        assert_eq!(back_substitute(&sys).unwrap(), DVector::from_vec(vec![3.0, 4.0]));

        let r = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 1.0]);
        let c = DVector::from_vec(vec![3.0, 1.0]);
        let sys = SquareRootSystem::from_dense(&r, &c, 0.0).unwrap();
        let x = back_substitute(&sys).unwrap();
        let dense = r.lu().solve(&c).unwrap();
        assert_relative_eq!(x, dense, epsilon = 1e-15);
        assert_relative_eq!(x, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-15);
    }

    #[test]
    fn back_substitution_rejects_zero_diagonal() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let sys = SquareRootSystem::from_dense(&r, &DVector::zeros(2), 0.0).unwrap();
        assert!(matches!(back_substitute(&sys), Err(Error::Singular { column: 1, .. })));
    }

    #[test]
    fn residual_identity_holds_at_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_matrix(&mut rng, 12, 4);
        let b = random_vector(&mut rng, 12);
        let sys = qr_factorize(&a, &b).unwrap();
        let x = back_substitute(&sys).unwrap();
        let cost = (&a * &x - &b).norm_squared();
        assert_relative_eq!(cost, sys.residual_norm_sq(), epsilon = 1e-9);
    }

    #[test]
    fn sparse_fold_on_grown_system() {
        // x0 = 1, x1 - x0 = 2 folded into an empty, growing system
        let mut sys = SquareRootSystem::zeros(1);
        let mut work = vec![0.0; 1];
        sys.fold_sparse(&[(0, 1.0)], 1.0, &mut work).unwrap();
        sys.grow(1);
        let mut work = vec![0.0; 2];
        sys.fold_sparse(&[(0, -1.0), (1, 1.0)], 2.0, &mut work).unwrap();
        assert!(work.iter().all(|v| *v == 0.0));
        let x = sys.solve().unwrap();
        assert_relative_eq!(x, DVector::from_vec(vec![1.0, 3.0]), epsilon = 1e-14);
    }

    proptest::proptest! {
        #[test]
        fn pythagoras_split(seed in 0u64..200, n in 4usize..14, m in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n.max(m), m);
            let b = random_vector(&mut rng, n.max(m));
            let sys = qr_factorize(&a, &b).unwrap();
            for _ in 0..10 {
                let x = random_vector(&mut rng, m) * 3.0;
                let lhs = (&a * &x - &b).norm_squared();
                let rhs = sys.reduced_cost(&x) + sys.residual_norm_sq();
                proptest::prop_assert!((lhs - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn incremental_rows_match_batch(seed in 0u64..200, m in 1usize..6, extra in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = m + extra;
            let a = random_matrix(&mut rng, n, m);
            let b = random_vector(&mut rng, n);
            let batch = qr_factorize(&a, &b).unwrap();
            let mut sys = SquareRootSystem::zeros(m);
            let mut work = vec![0.0; m];
            for i in 0..n {
                for j in 0..m { work[j] = a[(i, j)]; }
                sys.fold_row(&mut work, b[i]).unwrap();
            }
            for i in 0..m {
                for j in 0..m {
                    proptest::prop_assert!((sys.r_at(i, j) - batch.r_at(i, j)).abs() < 1e-8);
                }
                proptest::prop_assert!((sys.c()[i] - batch.c()[i]).abs() < 1e-8);
            }
            proptest::prop_assert!((sys.residual_norm_sq() - batch.residual_norm_sq()).abs() < 1e-8);
        }
    }
}
