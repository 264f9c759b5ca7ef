//! Square-root least squares: factor a tall system once, then fold in new
//! rows with Givens rotations and check the answer against a fresh QR.

use covadapt::solver::{givens_augment, qr_factorize};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> covadapt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let (m, extra, n) = (40, 10, 6);
    let a = draw(m + extra, n);
    let b: DVector<f64> = draw(m + extra, 1).column(0).into();

    let head = qr_factorize(&a.rows(0, m).into(), &b.rows(0, m).into())?;
    let sys = givens_augment(head, &a.rows(m, extra).into(), &b.rows(m, extra).into())?;
    let x = sys.solve()?;

    let full = qr_factorize(&a, &b)?;
    let x_full = full.solve()?;
    println!("incremental vs one-shot solution: max diff {:.2e}", (&x - &x_full).amax());

    let cost = (&a * &x - &b).norm_squared();
    println!(
        "‖Ax − b‖² = {cost:.6}, from the factor: {:.6}",
        sys.reduced_cost(&x) + sys.residual_norm_sq()
    );
    Ok(())
}
