//! Measurement functions shipped with the crate.
//!
//! State blocks for the localization factors are laid out as
//! `[position (2 or 3), clock bias]`; plain range factors ignore the clock.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A measurement function `h(X)` over the blocks a factor connects.
pub trait Measurement: fmt::Debug + Send + Sync {
    /// Dimension of the predicted observation.
    fn output_dim(&self) -> usize;

    fn predict(&self, blocks: &[&DVector<f64>]) -> DVector<f64>;

    /// `∂h/∂x_i` for each connected block. Defaults to central differences.
    fn jacobians(&self, blocks: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
        central_difference_jacobians(self, blocks)
    }

    /// Validates the dimensions of the connected blocks.
    fn check_blocks(&self, _dims: &[usize]) -> Result<()> {
        Ok(())
    }

    fn label(&self) -> &'static str {
        "custom"
    }
}

/// Central finite-difference Jacobians of any measurement.
pub fn central_difference_jacobians<M: Measurement + ?Sized>(m: &M, blocks: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
    let out = m.output_dim();
    let mut owned: Vec<DVector<f64>> = blocks.iter().map(|b| (*b).clone()).collect();
    let mut jacs = Vec::with_capacity(blocks.len());
    for bi in 0..owned.len() {
        let dim = owned[bi].len();
        let mut jac = DMatrix::zeros(out, dim);
        for k in 0..dim {
            let x0 = owned[bi][k];
            let h = 1e-6 * x0.abs().max(1.0);
            owned[bi][k] = x0 + h;
            let plus = m.predict(&owned.iter().collect::<Vec<_>>());
            owned[bi][k] = x0 - h;
            let minus = m.predict(&owned.iter().collect::<Vec<_>>());
            owned[bi][k] = x0;
            jac.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        jacs.push(jac);
    }
    jacs
}

fn expect_blocks(dims: &[usize], count: usize, context: &'static str) -> Result<()> {
    if dims.len() != count {
        return Err(Error::DimensionMismatch {
            context,
            expected: count,
            actual: dims.len(),
        });
    }
    Ok(())
}

/// `h(x) = x`.
#[derive(Debug, Clone)]
pub struct PriorMeasurement {
    pub dim: usize,
}

impl Measurement for PriorMeasurement {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, blocks: &[&DVector<f64>]) -> DVector<f64> {
        blocks[0].clone()
    }

    fn jacobians(&self, _blocks: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::identity(self.dim, self.dim)]
    }

    fn check_blocks(&self, dims: &[usize]) -> Result<()> {
        expect_blocks(dims, 1, "prior factor blocks")?;
        if dims[0] != self.dim {
            return Err(Error::DimensionMismatch {
                context: "prior factor variable",
                expected: self.dim,
                actual: dims[0],
            });
        }
        Ok(())
    }

    fn label(&self) -> &'static str {
        "prior"
    }
}

/// Additive odometry `h(x_i, x_j) = x_j − x_i`.
#[derive(Debug, Clone)]
pub struct BetweenMeasurement {
    pub dim: usize,
}

impl Measurement for BetweenMeasurement {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, blocks: &[&DVector<f64>]) -> DVector<f64> {
        blocks[1] - blocks[0]
    }

    fn jacobians(&self, _blocks: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
        vec![
            -DMatrix::identity(self.dim, self.dim),
            DMatrix::identity(self.dim, self.dim),
        ]
    }

    fn check_blocks(&self, dims: &[usize]) -> Result<()> {
        expect_blocks(dims, 2, "between factor blocks")?;
        for &d in dims {
            if d != self.dim {
                return Err(Error::DimensionMismatch {
                    context: "between factor variable",
                    expected: self.dim,
                    actual: d,
                });
            }
        }
        Ok(())
    }

    fn label(&self) -> &'static str {
        "between"
    }
}

fn geometric_range(anchor: &DVector<f64>, block: &DVector<f64>) -> (f64, DVector<f64>) {
    let n = anchor.len();
    let diff = block.rows(0, n) - anchor;
    let range = diff.norm();
    (range, diff / range)
}

/// Euclidean range `‖p − s‖` to a fixed anchor `s`.
#[derive(Debug, Clone)]
pub struct RangeMeasurement {
    pub anchor: DVector<f64>,
}

impl Measurement for RangeMeasurement {
    fn output_dim(&self) -> usize {
        1
    }

    fn predict(&self, blocks: &[&DVector<f64>]) -> DVector<f64> {
        DVector::from_element(1, geometric_range(&self.anchor, blocks[0]).0)
    }

    fn jacobians(&self, blocks: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
        let (_, unit) = geometric_range(&self.anchor, blocks[0]);
        let mut jac = DMatrix::zeros(1, blocks[0].len());
        for (k, u) in unit.iter().enumerate() {
            jac[(0, k)] = *u;
        }
        vec![jac]
    }

    fn check_blocks(&self, dims: &[usize]) -> Result<()> {
        expect_blocks(dims, 1, "range factor blocks")?;
        if dims[0] < self.anchor.len() {
            return Err(Error::DimensionMismatch {
                context: "range factor variable",
                expected: self.anchor.len(),
                actual: dims[0],
            });
        }
        Ok(())
    }

    fn label(&self) -> &'static str {
        "range"
    }
}

/// Pseudorange `‖p − s‖ + b` where `b` is the block entry right after the
/// position.
#[derive(Debug, Clone)]
pub struct PseudorangeMeasurement {
    pub anchor: DVector<f64>,
}

impl Measurement for PseudorangeMeasurement {
    fn output_dim(&self) -> usize {
        1
    }

    fn predict(&self, blocks: &[&DVector<f64>]) -> DVector<f64> {
        let (range, _) = geometric_range(&self.anchor, blocks[0]);
        DVector::from_element(1, range + blocks[0][self.anchor.len()])
    }

    fn jacobians(&self, blocks: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
        let (_, unit) = geometric_range(&self.anchor, blocks[0]);
        let mut jac = DMatrix::zeros(1, blocks[0].len());
        for (k, u) in unit.iter().enumerate() {
            jac[(0, k)] = *u;
        }
        jac[(0, self.anchor.len())] = 1.0;
        vec![jac]
    }

    fn check_blocks(&self, dims: &[usize]) -> Result<()> {
        expect_blocks(dims, 1, "pseudorange factor blocks")?;
        if dims[0] < self.anchor.len() + 1 {
            return Err(Error::DimensionMismatch {
                context: "pseudorange factor variable",
                expected: self.anchor.len() + 1,
                actual: dims[0],
            });
        }
        Ok(())
    }

    fn label(&self) -> &'static str {
        "pseudorange"
    }
}

/// Affine measurement `h(X) = Σ H_i x_i + offset`.
#[derive(Debug, Clone)]
pub struct LinearMeasurement {
    pub coefficients: Vec<DMatrix<f64>>,
    pub offset: DVector<f64>,
}

impl Measurement for LinearMeasurement {
    fn output_dim(&self) -> usize {
        self.offset.len()
    }

    fn predict(&self, blocks: &[&DVector<f64>]) -> DVector<f64> {
        self.coefficients
            .iter()
            .zip(blocks)
            .fold(self.offset.clone(), |acc, (h, x)| acc + h * *x)
    }

    fn jacobians(&self, _blocks: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
        self.coefficients.clone()
    }

    fn check_blocks(&self, dims: &[usize]) -> Result<()> {
        expect_blocks(dims, self.coefficients.len(), "linear factor blocks")?;
        for (h, &d) in self.coefficients.iter().zip(dims) {
            if h.ncols() != d || h.nrows() != self.offset.len() {
                return Err(Error::DimensionMismatch {
                    context: "linear factor coefficient",
                    expected: d,
                    actual: h.ncols(),
                });
            }
        }
        Ok(())
    }

    fn label(&self) -> &'static str {
        "linear"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_jacobians_match(m: &dyn Measurement, blocks: &[DVector<f64>]) {
        let refs: Vec<&DVector<f64>> = blocks.iter().collect();
        let analytic = m.jacobians(&refs);
        let numeric = central_difference_jacobians(m, &refs);
        for (a, n) in analytic.iter().zip(&numeric) {
            let scale = a.norm().max(1e-12);
            assert!((a - n).norm() / scale < 1e-5, "{}: {a} vs {n}", m.label());
        }
    }

    #[test]
    fn analytic_jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-20.0..20.0));
            let y = DVector::from_fn(3, |_, _| rng.random_range(-20.0..20.0));
            let anchor = DVector::from_fn(2, |_, _| rng.random_range(-100.0..100.0));
            assert_jacobians_match(&PriorMeasurement { dim: 3 }, &[x.clone()]);
            assert_jacobians_match(&BetweenMeasurement { dim: 3 }, &[x.clone(), y.clone()]);
            assert_jacobians_match(&RangeMeasurement { anchor: anchor.clone() }, &[x.clone()]);
            assert_jacobians_match(&PseudorangeMeasurement { anchor }, &[x.clone()]);
            let lin = LinearMeasurement {
                coefficients: vec![DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0))],
                offset: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
            };
            assert_jacobians_match(&lin, &[x]);
        }
    }

    #[test]
    fn range_three_four_five() {
        let m = RangeMeasurement {
            anchor: DVector::from_vec(vec![3.0, 4.0]),
        };
        let p = DVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(m.predict(&[&p])[0], 5.0);
    }

    #[test]
    fn pseudorange_adds_clock() {
        let m = PseudorangeMeasurement {
            anchor: DVector::from_vec(vec![3.0, 4.0]),
        };
        let p = DVector::from_vec(vec![0.0, 0.0, 2.5]);
        assert_eq!(m.predict(&[&p])[0], 7.5);
        assert!(m.check_blocks(&[2]).is_err());
        assert!(m.check_blocks(&[3]).is_ok());
    }
}
