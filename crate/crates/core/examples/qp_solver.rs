// The box- and group-constrained QP solver on its own: a two-task SVM dual
// and an ε-SVR dual through the split formulation.

use std::error::Error;

use ndarray::array;
use tensor_mtl::qp::{merge_split, solve_qp, svr_split, LambdaProblem, QpOptions, QpProblem};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    // max -1/2 x'Qx + 1'x  s.t. sum_{i in g} y_i x_i = 0, 0 <= x <= C
    let y = vec![1.0, -1.0, 1.0, -1.0];
    let k = array![[2.0, 0.5, 0.0, 0.1], [0.5, 1.0, 0.2, 0.0], [0.0, 0.2, 1.5, 0.3], [0.1, 0.0, 0.3, 1.0]];
    let mut q = k.clone();
    for i in 0..4 {
        for j in 0..4 {
            q[[i, j]] *= y[i] * y[j];
        }
    }
    let svm = QpProblem::new(q, vec![1.0; 4], y.clone(), vec![0, 0, 1, 1], 2, vec![0.0; 4], vec![10.0; 4])?;
    let sol = solve_qp(&svm, &QpOptions::default())?;
    println!("alpha = {:?}", sol.x);
    println!("biases per group = {:?}, KKT gap {:.1e}", sol.group_multipliers, sol.kkt_residual);
    for g in svm.group_sums(&sol.x) {
        if g.abs() > 1e-9 {
            return Err("equality constraint violated".into());
        }
    }

    // ε-SVR: max -1/2 λ'Kλ + y'λ - ε|λ|_1, sum λ = 0, |λ| <= C
    let svr = svr_split(LambdaProblem {
        q: k,
        y: vec![1.0, 2.0, 0.5, -1.0],
        epsilon: 0.1,
        c: 5.0,
        groups: vec![0; 4],
        n_groups: 1,
    })?;
    let sol = solve_qp(&svr, &QpOptions::default())?;
    let lambda = merge_split(&sol.x);
    println!("lambda = {lambda:?}, bias {:.4}", sol.group_multipliers[0]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
