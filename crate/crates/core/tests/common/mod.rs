//! Shared fixtures and independent reference implementations for the
//! integration tests.
#![allow(dead_code)]

pub mod properties;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensor_mtl::linsolve::SaddleSystem;
use tensor_mtl::qp::QpProblem;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || normal(rng))
}

pub fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn min_eigenvalue(a: &Array2<f64>) -> f64 {
    to_na(a).symmetric_eigenvalues().min()
}

pub fn max_eigenvalue(a: &Array2<f64>) -> f64 {
    to_na(a).symmetric_eigenvalues().max()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// A random instance with `Q = A^T A` (rank deficient for some draws),
/// up to three equality groups, mixed signs and boxes containing zero.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize) -> QpProblem<Array2<f64>> {
    let rows = rng.random_range(n.div_ceil(2)..=n + 5);
    let a = normal_matrix(rng, rows, n);
    let scale = rng.random_range(0.1..3.0) / rows as f64;
    let mut q = a.t().dot(&a) * scale;
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (q[[i, j]] + q[[j, i]]);
            q[[i, j]] = v;
            q[[j, i]] = v;
        }
    }
    let c: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let signs: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let n_groups = rng.random_range(1..=3usize.min(n));
    // every group gets at least one variable
    let groups: Vec<usize> = (0..n).map(|i| if i < n_groups { i } else { rng.random_range(0..n_groups) }).collect();
    let upper: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
    let lower: Vec<f64> = upper
        .iter()
        .map(|&u| if rng.random_bool(0.5) { 0.0 } else { -u })
        .collect();
    QpProblem::new(q, c, signs, groups, n_groups, lower, upper).expect("valid random QP")
}

/// Euclidean projection onto `{lower <= x <= upper, sum_{i in g} a_i x_i = 0}`
/// by bisection on each group's multiplier.
pub fn project_feasible(p: &QpProblem<Array2<f64>>, z: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; z.len()];
    for g in 0..p.n_groups {
        let idx: Vec<usize> = (0..z.len()).filter(|&i| p.groups[i] == g).collect();
        let at = |nu: f64, i: usize| (z[i] - nu * p.signs[i]).clamp(p.lower[i], p.upper[i]);
        let h = |nu: f64| idx.iter().map(|&i| p.signs[i] * at(nu, i)).sum::<f64>();
        let span = idx
            .iter()
            .map(|&i| z[i].abs() + p.lower[i].abs().max(p.upper[i].abs()))
            .fold(1.0f64, |a, b| a.max(b));
        let (mut lo, mut hi) = (-span, span);
        debug_assert!(h(lo) >= 0.0 && h(hi) <= 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if h(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * span {
                break;
            }
        }
        let nu = 0.5 * (lo + hi);
        for &i in &idx {
            x[i] = at(nu, i);
        }
    }
    x
}

/// Accelerated projected gradient with adaptive restart on the
/// minimization form, stopped once the projected-gradient step is below
/// `tol` (or after `max_iter` steps). Returns the point and the max-form
/// objective.
pub fn pg_oracle(p: &QpProblem<Array2<f64>>, tol: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let n = p.dim();
    let lip = max_eigenvalue(&p.q).max(1e-12);
    let step = 1.0 / lip;
    let mut x = project_feasible(p, &vec![0.0; n]);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let grad = |v: &[f64]| -> Vec<f64> {
        let qv = p.q.dot(&Array1::from(v.to_vec()));
        (0..n).map(|i| qv[i] - p.c[i]).collect()
    };
    let stationary = |x: &[f64]| {
        let g = grad(x);
        let z: Vec<f64> = (0..n).map(|i| x[i] - step * g[i]).collect();
        max_abs_diff(&project_feasible(p, &z), x) <= tol * (1.0 + max_abs(x))
    };
    for k in 0..max_iter {
        if k % 10 == 0 && stationary(&x) {
            break;
        }
        let g = grad(&y);
        let z: Vec<f64> = (0..n).map(|i| y[i] - step * g[i]).collect();
        let x_next = project_feasible(p, &z);
        // gradient restart: drop the momentum when it points uphill
        let uphill: f64 = (0..n).map(|i| (y[i] - x_next[i]) * (x_next[i] - x[i])).sum();
        if uphill > 0.0 {
            t = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y = (0..n).map(|i| x_next[i] + beta * (x_next[i] - x[i])).collect();
        x = x_next;
        t = t_next;
    }
    let obj = p.objective(&x);
    (x, obj)
}

/// A random saddle system with `H = B B^T / k + I / C`, mixed signs in `V`
/// and random right-hand sides.
pub fn random_saddle(rng: &mut ChaCha8Rng, k: usize) -> SaddleSystem {
    let n_groups = rng.random_range(1..=k.min(6));
    let cols = rng.random_range(1..=k);
    let b = normal_matrix(rng, k, cols);
    let c = 2f64.powf(rng.random_range(-3.0..6.0));
    let mut h = b.dot(&b.t()) / k as f64;
    for i in 0..k {
        for j in 0..i {
            let v = 0.5 * (h[[i, j]] + h[[j, i]]);
            h[[i, j]] = v;
            h[[j, i]] = v;
        }
        h[[i, i]] += 1.0 / c;
    }
    SaddleSystem {
        h,
        v_groups: (0..k).map(|j| if j < n_groups { j } else { rng.random_range(0..n_groups) }).collect(),
        v_signs: (0..k).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
        n_groups,
        d1: (0..n_groups).map(|_| if rng.random_bool(0.5) { 0.0 } else { normal(rng) }).collect(),
        d2: (0..k).map(|_| normal(rng)).collect(),
    }
}

/// Dense LU solve of the full indefinite block system.
pub fn dense_saddle(sys: &SaddleSystem) -> (Vec<f64>, Vec<f64>) {
    let m = to_na(&sys.block_matrix());
    let mut rhs = sys.d1.clone();
    rhs.extend_from_slice(&sys.d2);
    let sol = m.lu().solve(&DVector::from_vec(rhs)).expect("nonsingular block matrix");
    let g = sys.n_groups;
    (sol.as_slice()[..g].to_vec(), sol.as_slice()[g..].to_vec())
}

/// Which standard single-task machine to fit in [`reference_machine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Machine {
    Svc,
    Svr { epsilon: f64 },
    Lssvc,
    Lssvr,
}

/// A textbook single-task SVM/LSSVM on the kernel matrix `k`, solved
/// without the library: dense KKT solves for the least-squares machines,
/// and projected gradient plus an exact KKT solve on the detected free set
/// for the SVMs. Returns `(beta, b)` with decision `f(x) = sum_i beta_i
/// k(x_i, x) + b`, or `None` when the SVM has no free variable (bias not
/// unique).
pub fn reference_machine(machine: Machine, k: &Array2<f64>, y: &[f64], c: f64) -> Option<(Vec<f64>, f64)> {
    let m = y.len();
    match machine {
        Machine::Lssvc | Machine::Lssvr => {
            let mut a = DMatrix::zeros(m + 1, m + 1);
            let mut rhs = DVector::zeros(m + 1);
            let classification = machine == Machine::Lssvc;
            for i in 0..m {
                let v = if classification { y[i] } else { 1.0 };
                a[(0, i + 1)] = v;
                a[(i + 1, 0)] = v;
                rhs[i + 1] = if classification { 1.0 } else { y[i] };
                for j in 0..m {
                    let s = if classification { y[i] * y[j] } else { 1.0 };
                    a[(i + 1, j + 1)] = s * k[[i, j]];
                }
                a[(i + 1, i + 1)] += 1.0 / c;
            }
            let sol = a.lu().solve(&rhs)?;
            let beta = (0..m)
                .map(|i| if classification { sol[i + 1] * y[i] } else { sol[i + 1] })
                .collect();
            Some((beta, sol[0]))
        }
        Machine::Svc => {
            let mut q = k.clone();
            for i in 0..m {
                for j in 0..m {
                    q[[i, j]] *= y[i] * y[j];
                }
            }
            let p = QpProblem::new(q, vec![1.0; m], y.to_vec(), vec![0; m], 1, vec![0.0; m], vec![c; m]).ok()?;
            let (alpha, _) = pg_oracle(&p, 1e-13, 2_000_000);
            let beta: Vec<f64> = alpha.iter().zip(y).map(|(a, y)| a * y).collect();
            refine(k, beta, &vec![0.0; m], y, c)
        }
        Machine::Svr { epsilon } => {
            let mut q = Array2::zeros((2 * m, 2 * m));
            for i in 0..m {
                for j in 0..m {
                    q[[i, j]] = k[[i, j]];
                    q[[m + i, m + j]] = k[[i, j]];
                    q[[i, m + j]] = -k[[i, j]];
                    q[[m + i, j]] = -k[[i, j]];
                }
            }
            let mut lin: Vec<f64> = y.iter().map(|v| v - epsilon).collect();
            lin.extend(y.iter().map(|v| -v - epsilon));
            let mut signs = vec![1.0; m];
            signs.extend(std::iter::repeat_n(-1.0, m));
            let p = QpProblem::new(q, lin, signs, vec![0; 2 * m], 1, vec![0.0; 2 * m], vec![c; 2 * m]).ok()?;
            let (x, _) = pg_oracle(&p, 1e-13, 2_000_000);
            let lambda: Vec<f64> = (0..m).map(|i| x[i] - x[m + i]).collect();
            let shift: Vec<f64> = lambda.iter().map(|l| epsilon * l.signum()).collect();
            refine(k, lambda, &shift, y, c)
        }
    }
}

/// Given an approximate dual `beta` with `|beta_i| <= C`, fixes the bound
/// and zero entries and solves the KKT equations of the free ones exactly:
/// `(K beta)_i + b = y_i - shift_i` for free `i` and `sum beta = 0`.
fn refine(k: &Array2<f64>, beta: Vec<f64>, shift: &[f64], y: &[f64], c: f64) -> Option<(Vec<f64>, f64)> {
    let m = beta.len();
    let gap = 1e-7 * c;
    let free: Vec<usize> = (0..m)
        .filter(|&i| beta[i].abs() > gap && beta[i].abs() < c - gap)
        .collect();
    if free.is_empty() {
        return None;
    }
    let fixed: Vec<f64> = (0..m)
        .map(|i| {
            if free.contains(&i) {
                0.0
            } else if beta[i].abs() <= gap {
                0.0
            } else {
                c * beta[i].signum()
            }
        })
        .collect();
    let nf = free.len();
    let mut a = DMatrix::zeros(nf + 1, nf + 1);
    let mut rhs = DVector::zeros(nf + 1);
    for (r, &i) in free.iter().enumerate() {
        a[(r, nf)] = 1.0;
        a[(nf, r)] = 1.0;
        let fixed_part: f64 = (0..m).map(|j| k[[i, j]] * fixed[j]).sum();
        rhs[r] = y[i] - shift[i] - fixed_part;
        for (s, &j) in free.iter().enumerate() {
            a[(r, s)] = k[[i, j]];
        }
    }
    rhs[nf] = -fixed.iter().sum::<f64>();
    let sol = a.lu().solve(&rhs)?;
    let mut out = fixed;
    for (r, &i) in free.iter().enumerate() {
        out[i] = sol[r];
    }
    Some((out, sol[nf]))
}
