//! Locating a static receiver from four range anchors, in batch and then
//! one anchor at a time through the incremental smoother.

use covadapt::graph::{
    solve_batch, solve_incremental, BatchConfig, Factor, FactorGraph, IncrementalConfig, IncrementalSession, KeepTreatments, NoiseModel,
    StateVector, VarId,
};
use nalgebra::{DMatrix, DVector};

fn main() -> covadapt::Result<()> {
    let truth = DVector::from_vec(vec![3.0, -2.0]);
    let anchors = [[0.0, 0.0], [20.0, 0.0], [20.0, 20.0], [0.0, 20.0]];
    let x = VarId::new(0, "x");
    let one = || NoiseModel::Fixed(DMatrix::identity(1, 1) * 0.01);

    let factors: Vec<Factor> = anchors
        .iter()
        .map(|a| {
            let a = DVector::from_row_slice(a);
            let r = (&truth - &a).norm();
            Factor::range(x.clone(), a, r, one())
        })
        .collect::<covadapt::Result<_>>()?;
    let prior = Factor::prior(x.clone(), DVector::from_vec(vec![10.0, 10.0]), DMatrix::identity(2, 2) * 1e6)?;

    let mut graph = FactorGraph::new();
    graph.add_variable(x.clone(), 2)?;
    graph.add_factor(prior.clone())?;
    for f in &factors {
        graph.add_factor(f.clone())?;
    }
    let mut init = StateVector::new();
    init.insert(x.clone(), DVector::from_vec(vec![10.0, 10.0]))?;
    let batch = solve_batch(&graph, &init, &BatchConfig::default())?;
    println!("batch estimate {:?}", batch.value(0).as_slice());

    let mut session = IncrementalSession::new(IncrementalConfig::default());
    solve_incremental(&mut session, vec![(x.clone(), DVector::from_vec(vec![10.0, 10.0]))], vec![prior])?;
    for (i, f) in factors.into_iter().enumerate() {
        let est = solve_incremental(&mut session, vec![], vec![f])?;
        println!("after anchor {i}: {:?}", est.value(0).as_slice());
    }
    // Every factor so far was linearized at the initial guess.
    for pass in 0..3 {
        session.relinearize(&mut KeepTreatments)?;
        println!("relinearized {pass}: {:?}", session.estimate().value(0).as_slice());
    }
    Ok(())
}
