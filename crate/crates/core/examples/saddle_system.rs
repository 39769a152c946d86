// The LSSVM block system `[0 V'; V H] [b; x] = [d1; d2]`, solved through the
// positive definite reformulation with Cholesky and with LU.

use std::error::Error;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensor_mtl::linsolve::{solve_saddle, PdSolver, SaddleSystem};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (k, groups) = (40, 3);
    let a = Array2::from_shape_fn((k, k), |_| rng.random_range(-1.0..1.0));
    // H = A A' / k + I/C with C = 2
    let mut h = a.dot(&a.t()) / k as f64;
    for i in 0..k {
        h[[i, i]] += 0.5;
    }
    let sys = SaddleSystem {
        h,
        v_groups: (0..k).map(|i| i % groups).collect(),
        v_signs: (0..k).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
        n_groups: groups,
        d1: vec![0.0; groups],
        d2: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let chol = solve_saddle(&sys, PdSolver::Cholesky)?;
    let lu = solve_saddle(&sys, PdSolver::Lu)?;
    println!("biases (Cholesky) = {:?}", chol.x1);
    println!("residual: Cholesky {:.2e}, LU {:.2e}", chol.residual, lu.residual);
    let diff = chol.x2.iter().zip(&lu.x2).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("largest difference between the two paths: {diff:.2e}");
    if chol.residual > 1e-9 || diff > 1e-9 {
        return Err("solves disagree".into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
