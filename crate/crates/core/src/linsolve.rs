//! LSSVM saddle-point systems and their positive-definite reformulation.
//!
//! Both LSSVM subproblems produce a KKT system
//!
//! ```text
//! [ 0  V^T ] [x1]   [d1]
//! [ V   H  ] [x2] = [d2]
//! ```
//!
//! with `H = Q + I/C` positive definite and `V` a signed group indicator.
//! Eliminating `x2` leaves the small PD system `(V^T H^-1 V) x1 = V^T H^-1 d2 - d1`,
//! so one factorization of `H` serves every right-hand side.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::cp::symmetrize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinsolveError {
    #[error("matrix is not positive definite: pivot {pivot} at index {index} (floor {floor:.3e})")]
    NotPositiveDefinite { index: usize, pivot: f64, floor: f64 },
    #[error("matrix is singular at pivot {0}")]
    Singular(usize),
    #[error("constraint block is rank deficient: {0}")]
    DegenerateConstraints(String),
    #[error("group {0} has no rows")]
    EmptyGroup(usize),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("C must be positive and finite, got {0}")]
    InvalidC(f64),
}

const BLOCK: usize = 128;

/// Relative pivot floor: pivots at or below `PIVOT_FLOOR * max|diag|` are
/// rejected rather than regularized.
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Lower-triangular Cholesky factor `M = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Array2<f64>,
}

/// Factors a symmetric positive-definite matrix. Only the lower triangle
/// of `m` is read.
pub fn cholesky_pd(m: &Array2<f64>) -> Result<Cholesky, LinsolveError> {
    Cholesky::factor(m.clone())
}

impl Cholesky {
    /// Factors in place, reusing the allocation of `a`.
    pub fn factor(mut a: Array2<f64>) -> Result<Self, LinsolveError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LinsolveError::Shape(format!("{}x{} is not square", n, a.ncols())));
        }
        if !a.is_standard_layout() {
            a = a.as_standard_layout().into_owned();
        }
        let max_diag = a.diag().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let floor = PIVOT_FLOOR * max_diag;
        let mut k = 0;
        while k < n {
            let kb = BLOCK.min(n - k);
            factor_diagonal_block(&mut a, k, kb, floor)?;
            let rest = k + kb;
            if rest < n {
                solve_panel(&mut a, k, kb);
                let (panel, mut trailing) = a.multi_slice_mut((s![.., k..rest], s![.., rest..]));
                let panel = panel.view();
                let mut ib = rest;
                while ib < n {
                    let ie = (ib + BLOCK).min(n);
                    let lhs = panel.slice(s![ib..ie, ..]);
                    let rhs = panel.slice(s![rest..ie, ..]);
                    let mut target = trailing.slice_mut(s![ib..ie, 0..ie - rest]);
                    general_mat_mul(-1.0, &lhs, &rhs.t(), 1.0, &mut target);
                    ib = ie;
                }
            }
            k = rest;
        }
        for i in 0..n {
            for j in i + 1..n {
                a[[i, j]] = 0.0;
            }
        }
        Ok(Cholesky { l: a })
    }

    pub fn factor_matrix(&self) -> &Array2<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L y = b` in place.
    pub fn forward(&self, b: &mut [f64]) {
        let l = &self.l;
        for i in 0..b.len() {
            let row = l.row(i);
            let row = row.as_slice().unwrap();
            let s = dot(&row[..i], &b[..i]);
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// Solves `L^T x = y` in place.
    pub fn backward(&self, y: &mut [f64]) {
        let l = &self.l;
        for i in (0..y.len()).rev() {
            let row = l.row(i);
            let row = row.as_slice().unwrap();
            y[i] /= row[i];
            let xi = y[i];
            for (yj, lij) in y[..i].iter_mut().zip(&row[..i]) {
                *yj -= lij * xi;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward(&mut x);
        self.backward(&mut x);
        x
    }

    /// Solves `M X = B` for every column of `B`.
    pub fn solve_multi(&self, b: &Array2<f64>) -> Array2<f64> {
        let mut x = b.clone();
        let n = self.dim();
        let l = &self.l;
        // forward, block rows top to bottom
        let mut k = 0;
        while k < n {
            let ke = (k + BLOCK).min(n);
            if k > 0 {
                let (done, mut cur) = x.multi_slice_mut((s![0..k, ..], s![k..ke, ..]));
                general_mat_mul(-1.0, &l.slice(s![k..ke, 0..k]), &done.view(), 1.0, &mut cur);
            }
            for i in k..ke {
                let lii = l[[i, i]];
                for j in k..i {
                    let lij = l[[i, j]];
                    if lij != 0.0 {
                        let (src, mut dst) = x.multi_slice_mut((s![j, ..], s![i, ..]));
                        dst.scaled_add(-lij, &src);
                    }
                }
                x.row_mut(i).mapv_inplace(|v| v / lii);
            }
            k = ke;
        }
        // backward, block rows bottom to top
        let mut ke = n;
        while ke > 0 {
            let k = ke.saturating_sub(BLOCK);
            if ke < n {
                let (mut cur, done) = x.multi_slice_mut((s![k..ke, ..], s![ke..n, ..]));
                general_mat_mul(-1.0, &l.slice(s![ke..n, k..ke]).t(), &done.view(), 1.0, &mut cur);
            }
            for i in (k..ke).rev() {
                let lii = l[[i, i]];
                x.row_mut(i).mapv_inplace(|v| v / lii);
                for j in k..i {
                    let lij = l[[i, j]];
                    if lij != 0.0 {
                        let (mut dst, src) = x.multi_slice_mut((s![j, ..], s![i, ..]));
                        dst.scaled_add(-lij, &src);
                    }
                }
            }
            ke = k;
        }
        x
    }
}

fn factor_diagonal_block(a: &mut Array2<f64>, k: usize, kb: usize, floor: f64) -> Result<(), LinsolveError> {
    for j in k..k + kb {
        let rj = a.row(j);
        let rj = rj.as_slice().unwrap();
        let d = rj[j] - dot(&rj[k..j], &rj[k..j]);
        if !(d > floor) {
            return Err(LinsolveError::NotPositiveDefinite { index: j, pivot: d, floor });
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in j + 1..k + kb {
            let (ri, rj) = a.multi_slice_mut((s![i, ..], s![j, ..]));
            let ri = ri.into_slice().unwrap();
            let rj = rj.into_slice().unwrap();
            ri[j] = (ri[j] - dot(&ri[k..j], &rj[k..j])) / d;
        }
    }
    Ok(())
}

/// `L21 = A21 L11^-T` for the rows below the diagonal block.
fn solve_panel(a: &mut Array2<f64>, k: usize, kb: usize) {
    let n = a.nrows();
    let (diag, mut below) = a.multi_slice_mut((s![k..k + kb, ..], s![k + kb..n, ..]));
    let diag = diag.view();
    for mut row in below.axis_iter_mut(Axis(0)) {
        let row = row.as_slice_mut().unwrap();
        for j in 0..kb {
            let dj = diag.row(j);
            let dj = dj.as_slice().unwrap();
            let s = dot(&row[k..k + j], &dj[k..k + j]);
            row[k + j] = (row[k + j] - s) / dj[k + j];
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let o = c * 8;
        for l in 0..8 {
            acc[l] += a[o + l] * b[o + l];
        }
    }
    let mut s = 0.0;
    for o in chunks * 8..n {
        s += a[o] * b[o];
    }
    s + ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// LU factorization with partial pivoting; the non-Cholesky PD path.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Array2<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(mut a: Array2<f64>) -> Result<Self, LinsolveError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LinsolveError::Shape(format!("{}x{} is not square", n, a.ncols())));
        }
        if !a.is_standard_layout() {
            a = a.as_standard_layout().into_owned();
        }
        let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pv) = (k..n)
                .map(|i| (i, a[[i, k]].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pv > PIVOT_FLOOR * scale) {
                return Err(LinsolveError::Singular(k));
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    a.swap([p, j], [k, j]);
                }
            }
            let (top, mut bottom) = a.multi_slice_mut((s![k, ..], s![k + 1..n, ..]));
            let pivot_row = top.view();
            let piv = pivot_row[k];
            for mut row in bottom.axis_iter_mut(Axis(0)) {
                let f = row[k] / piv;
                row[k] = f;
                if f != 0.0 {
                    let row = row.as_slice_mut().unwrap();
                    let prow = pivot_row.as_slice().unwrap();
                    for (r, p) in row[k + 1..].iter_mut().zip(&prow[k + 1..]) {
                        *r -= f * p;
                    }
                }
            }
        }
        Ok(Lu { lu: a, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.nrows();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let row = row.as_slice().unwrap();
            x[i] -= dot(&row[..i], &x[..i]);
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let row = row.as_slice().unwrap();
            x[i] = (x[i] - dot(&row[i + 1..], &x[i + 1..])) / row[i];
        }
        x
    }

    pub fn solve_multi(&self, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(b.dim());
        for (j, col) in b.axis_iter(Axis(1)).enumerate() {
            let x = self.solve(&col.to_vec());
            out.column_mut(j).assign(&Array1::from(x));
        }
        out
    }
}

/// Which factorization handles the `H^-1` applications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdSolver {
    #[default]
    Cholesky,
    Lu,
}

enum Factor {
    Chol(Cholesky),
    Lu(Lu),
}

impl Factor {
    fn new(m: Array2<f64>, solver: PdSolver) -> Result<Self, LinsolveError> {
        match solver {
            PdSolver::Cholesky => Cholesky::factor(m).map(Factor::Chol),
            PdSolver::Lu => Lu::factor(m).map(Factor::Lu),
        }
    }

    fn solve_multi(&self, b: &Array2<f64>) -> Array2<f64> {
        match self {
            Factor::Chol(c) => c.solve_multi(b),
            Factor::Lu(l) => l.solve_multi(b),
        }
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        match self {
            Factor::Chol(c) => c.solve(b),
            Factor::Lu(l) => l.solve(b),
        }
    }
}

/// `[0 V^T; V H] [x1; x2] = [d1; d2]` with `V` stored sparsely: row `j`
/// of `V` has the single entry `v_signs[j]` in column `v_groups[j]`.
#[derive(Debug, Clone)]
pub struct SaddleSystem {
    pub h: Array2<f64>,
    pub v_groups: Vec<usize>,
    pub v_signs: Vec<f64>,
    pub n_groups: usize,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution {
    /// Biases, one per group.
    pub x1: Vec<f64>,
    /// Dual variables, one per row of `H`.
    pub x2: Vec<f64>,
    /// `||[0 V^T; V H] [x1; x2] - [d1; d2]||_inf`.
    pub residual: f64,
}

impl SaddleSystem {
    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<(), LinsolveError> {
        let k = self.h.nrows();
        if self.h.ncols() != k || self.v_groups.len() != k || self.v_signs.len() != k || self.d2.len() != k {
            return Err(LinsolveError::Shape(format!(
                "H {:?}, V rows {}, d2 {}",
                self.h.dim(),
                self.v_groups.len(),
                self.d2.len()
            )));
        }
        if self.d1.len() != self.n_groups {
            return Err(LinsolveError::Shape(format!("d1 has {} entries for {} groups", self.d1.len(), self.n_groups)));
        }
        let mut count = vec![0usize; self.n_groups];
        for &g in &self.v_groups {
            if g >= self.n_groups {
                return Err(LinsolveError::Shape(format!("row in group {g} of {}", self.n_groups)));
            }
            count[g] += 1;
        }
        if let Some(g) = count.iter().position(|&c| c == 0) {
            return Err(LinsolveError::EmptyGroup(g));
        }
        if self.v_signs.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(LinsolveError::Shape("V has a zero or non-finite entry".into()));
        }
        Ok(())
    }

    /// Dense `k x g` copy of `V`.
    pub fn v_dense(&self) -> Array2<f64> {
        let mut v = Array2::zeros((self.dim(), self.n_groups));
        for (j, (&g, &s)) in self.v_groups.iter().zip(&self.v_signs).enumerate() {
            v[[j, g]] = s;
        }
        v
    }

    /// Dense copy of the full indefinite block matrix.
    pub fn block_matrix(&self) -> Array2<f64> {
        let (k, g) = (self.dim(), self.n_groups);
        let mut m = Array2::zeros((g + k, g + k));
        m.slice_mut(s![g.., g..]).assign(&self.h);
        for (j, (&grp, &s)) in self.v_groups.iter().zip(&self.v_signs).enumerate() {
            m[[g + j, grp]] = s;
            m[[grp, g + j]] = s;
        }
        m
    }

    /// `||block * [x1; x2] - [d1; d2]||_inf`.
    pub fn residual(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let mut r1: Vec<f64> = self.d1.iter().map(|d| -d).collect();
        for (j, (&g, &s)) in self.v_groups.iter().zip(&self.v_signs).enumerate() {
            r1[g] += s * x2[j];
        }
        let hx = self.h.dot(&ndarray::ArrayView1::from(x2));
        let mut worst = r1.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for j in 0..self.dim() {
            let r = hx[j] + self.v_signs[j] * x1[self.v_groups[j]] - self.d2[j];
            worst = worst.max(r.abs());
        }
        worst
    }
}

/// The L-update system: `H = Q + I/C`; `V = Y A` with `A` the task
/// indicator (signs are the labels for classification, all ones for
/// regression); `d1 = 0`; `d2 = 1` (classification) or `y` (regression).
pub fn assemble_l_system(
    mut q: Array2<f64>,
    sample_tasks: &[usize],
    labels: &[f64],
    classification: bool,
    c: f64,
    n_tasks: usize,
) -> Result<SaddleSystem, LinsolveError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(LinsolveError::InvalidC(c));
    }
    let m = q.nrows();
    if sample_tasks.len() != m || labels.len() != m {
        return Err(LinsolveError::Shape(format!(
            "Q is {m}x{m} with {} task ids and {} labels",
            sample_tasks.len(),
            labels.len()
        )));
    }
    q.diag_mut().mapv_inplace(|v| v + 1.0 / c);
    let (v_signs, d2) = if classification {
        (labels.to_vec(), vec![1.0; m])
    } else {
        (vec![1.0; m], labels.to_vec())
    };
    let s = SaddleSystem {
        h: q,
        v_groups: sample_tasks.to_vec(),
        v_signs,
        n_groups: n_tasks,
        d1: vec![0.0; n_tasks],
        d2,
    };
    s.validate()?;
    Ok(s)
}

/// The factor-row update system over the tasks of one slice:
/// `H = Y Z Z^T Y + I/C` (classification) or `Z Z^T + I/C` (regression),
/// where row `j` of `z` is the z-feature of sample `j`.
pub fn assemble_u_system(
    z: ArrayView2<'_, f64>,
    local_groups: &[usize],
    labels: &[f64],
    classification: bool,
    c: f64,
    n_groups: usize,
) -> Result<SaddleSystem, LinsolveError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(LinsolveError::InvalidC(c));
    }
    let m = z.nrows();
    if local_groups.len() != m || labels.len() != m {
        return Err(LinsolveError::Shape(format!(
            "{m} z-rows with {} group ids and {} labels",
            local_groups.len(),
            labels.len()
        )));
    }
    let mut h = z.dot(&z.t());
    if classification {
        for ((i, j), v) in h.indexed_iter_mut() {
            *v *= labels[i] * labels[j];
        }
    }
    symmetrize(&mut h);
    h.diag_mut().mapv_inplace(|v| v + 1.0 / c);
    let (v_signs, d2) = if classification {
        (labels.to_vec(), vec![1.0; m])
    } else {
        (vec![1.0; m], labels.to_vec())
    };
    let s = SaddleSystem {
        h,
        v_groups: local_groups.to_vec(),
        v_signs,
        n_groups,
        d1: vec![0.0; n_groups],
        d2,
    };
    s.validate()?;
    Ok(s)
}

/// Solves the saddle system through `s = V^T H^-1 V`:
/// `s x1 = V^T H^-1 d2 - d1`, then `x2 = H^-1 (d2 - V x1)`.
pub fn solve_saddle(sys: &SaddleSystem, solver: PdSolver) -> Result<SaddleSolution, LinsolveError> {
    sys.validate()?;
    let k = sys.dim();
    let g = sys.n_groups;
    let factor = Factor::new(sys.h.clone(), solver)?;

    // right-hand sides: the columns of V, then d2
    let mut rhs = Array2::zeros((k, g + 1));
    for (j, (&grp, &sgn)) in sys.v_groups.iter().zip(&sys.v_signs).enumerate() {
        rhs[[j, grp]] = sgn;
        rhs[[j, g]] = sys.d2[j];
    }
    let sol = factor.solve_multi(&rhs);

    // s = V^T W and V^T h2, accumulated from the sparse rows of V
    let mut smat = Array2::zeros((g, g));
    let mut srhs: Vec<f64> = sys.d1.iter().map(|d| -d).collect();
    for (j, (&grp, &sgn)) in sys.v_groups.iter().zip(&sys.v_signs).enumerate() {
        let row = sol.row(j);
        for b in 0..g {
            smat[[grp, b]] += sgn * row[b];
        }
        srhs[grp] += sgn * row[g];
    }
    let avg = smat.clone();
    for a in 0..g {
        for b in 0..g {
            smat[[a, b]] = 0.5 * (avg[[a, b]] + avg[[b, a]]);
        }
    }
    let x1 = match solver {
        PdSolver::Cholesky => Cholesky::factor(smat)
            .map_err(|e| LinsolveError::DegenerateConstraints(e.to_string()))?
            .solve(&srhs),
        PdSolver::Lu => Factor::new(smat, PdSolver::Lu)
            .map_err(|e| LinsolveError::DegenerateConstraints(e.to_string()))?
            .solve(&srhs),
    };
    let mut x2 = sol.column(g).to_vec();
    for (j, xj) in x2.iter_mut().enumerate() {
        let row = sol.row(j);
        *xj -= (0..g).map(|b| row[b] * x1[b]).sum::<f64>();
    }
    let residual = sys.residual(&x1, &x2);
    Ok(SaddleSolution { x1, x2, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_identity_and_hand_example() {
        let eye = Array2::<f64>::eye(5);
        assert_eq!(cholesky_pd(&eye).unwrap().factor_matrix(), &eye);

        let m = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky_pd(&m).unwrap();
        let expect = array![[2.0, 0.0], [1.0, 2f64.sqrt()]];
        for (a, b) in l.factor_matrix().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cholesky_reports_pivot() {
        let m = array![[1.0, 2.0], [2.0, 1.0]];
        match cholesky_pd(&m) {
            Err(LinsolveError::NotPositiveDefinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn blocked_factor_reconstructs_large_matrix() {
        let n = 300; // spans several blocks
        let b = Array2::from_shape_fn((n, n), |(i, j)| ((i * 7 + j * 13) % 17) as f64 / 17.0 - 0.5);
        let mut m = b.dot(&b.t());
        m.diag_mut().mapv_inplace(|v| v + 1.0);
        let c = cholesky_pd(&m).unwrap();
        let rec = c.factor_matrix().dot(&c.factor_matrix().t());
        let norm = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let err = (&rec - &m).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err <= 1e-12 * norm, "reconstruction error {err}");

        let rhs = Array2::from_shape_fn((n, 3), |(i, j)| (i as f64 + 1.0) * (j as f64 - 1.0));
        let x = c.solve_multi(&rhs);
        let back = m.dot(&x);
        let err = (&back - &rhs).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-8, "solve residual {err}");
        let single = c.solve(&rhs.column(2).to_vec());
        for i in 0..n {
            assert!((single[i] - x[[i, 2]]).abs() < 1e-9);
        }
    }

    #[test]
    fn lu_matches_cholesky() {
        let m = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let b = [1.0, -2.0, 0.5];
        let a = Cholesky::factor(m.clone()).unwrap().solve(&b);
        let c = Lu::factor(m).unwrap().solve(&b);
        for i in 0..3 {
            assert!((a[i] - c[i]).abs() < 1e-14);
        }
        assert!(matches!(Lu::factor(array![[1.0, 2.0], [2.0, 4.0]]), Err(LinsolveError::Singular(1))));
    }

    #[test]
    fn single_sample_lssvc_system() {
        // T = 1, x = 1, y = 1, C = 1, u = 1: [[0, 1], [1, 2]] [b; α] = [0; 1]
        let q = array![[1.0]];
        let sys = assemble_l_system(q, &[0], &[1.0], true, 1.0, 1).unwrap();
        assert_eq!(sys.block_matrix(), array![[0.0, 1.0], [1.0, 2.0]]);
        for solver in [PdSolver::Cholesky, PdSolver::Lu] {
            let sol = solve_saddle(&sys, solver).unwrap();
            assert!((sol.x1[0] - 1.0).abs() < 1e-15);
            assert!(sol.x2[0].abs() < 1e-15);
            assert!(sol.residual < 1e-15);
        }
    }

    #[test]
    fn zero_right_hand_side_gives_zero() {
        let q = array![[2.0, 0.5, 0.1], [0.5, 1.0, 0.0], [0.1, 0.0, 1.5]];
        let mut sys = assemble_l_system(q, &[0, 0, 1], &[0.0, 0.0, 0.0], false, 2.0, 2).unwrap();
        sys.d2 = vec![0.0; 3];
        let sol = solve_saddle(&sys, PdSolver::Cholesky).unwrap();
        assert!(sol.x1.iter().chain(&sol.x2).all(|&v| v == 0.0));
    }

    #[test]
    fn l_system_layout() {
        let q = array![[1.0, 0.2, 0.3], [0.2, 2.0, 0.4], [0.3, 0.4, 3.0]];
        let sys = assemble_l_system(q.clone(), &[0, 1, 1], &[1.0, -1.0, 1.0], true, 0.5, 2).unwrap();
        let b = sys.block_matrix();
        let expect = array![
            [0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, -1.0, 1.0],
            [1.0, 0.0, 3.0, 0.2, 0.3],
            [0.0, -1.0, 0.2, 4.0, 0.4],
            [0.0, 1.0, 0.3, 0.4, 5.0]
        ];
        assert_eq!(b, expect);
        assert_eq!(sys.d2, vec![1.0; 3]);

        let reg = assemble_l_system(q, &[0, 1, 1], &[0.5, -2.0, 1.0], false, 0.5, 2).unwrap();
        assert_eq!(reg.v_signs, vec![1.0; 3]);
        assert_eq!(reg.d2, vec![0.5, -2.0, 1.0]);
    }

    #[test]
    fn empty_task_is_rejected() {
        let q = array![[1.0]];
        assert_eq!(
            assemble_l_system(q, &[0], &[1.0], true, 1.0, 2).unwrap_err(),
            LinsolveError::EmptyGroup(1)
        );
        assert!(matches!(
            assemble_l_system(array![[1.0]], &[0], &[1.0], true, 0.0, 1),
            Err(LinsolveError::InvalidC(_))
        ));
    }

    #[test]
    fn u_system_block_diagonal_for_orthogonal_z() {
        let z = array![[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]];
        let sys = assemble_u_system(z.view(), &[0, 0, 1], &[1.0, -1.0, 1.0], true, 1.0, 2).unwrap();
        assert_eq!(sys.h[[0, 2]], 0.0);
        assert_eq!(sys.h[[1, 2]], 0.0);
        assert_eq!(sys.h[[0, 1]], -2.0);
        assert_eq!(sys.h[[1, 1]], 5.0);
    }

    #[test]
    fn u_system_matches_triple_loop() {
        let z = array![[0.5, -1.0, 2.0], [1.5, 0.3, -0.2], [0.0, 2.0, 1.0], [-1.0, 0.5, 0.5]];
        let y = [1.0, -1.0, -1.0, 1.0];
        let c = 3.0;
        let sys = assemble_u_system(z.view(), &[0, 1, 1, 2], &y, true, c, 3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut expect = 0.0;
                for r in 0..3 {
                    expect += z[[i, r]] * z[[j, r]];
                }
                expect *= y[i] * y[j];
                if i == j {
                    expect += 1.0 / c;
                }
                assert!((sys.h[[i, j]] - expect).abs() < 1e-14);
            }
        }
    }
}
