//! Box- and group-equality-constrained convex QPs.
//!
//! Every subproblem of the SVM variants has the form
//!
//! ```text
//! max  -1/2 x^T Q x + c^T x
//! s.t. sum_{i in g} a_i x_i = 0   for every group g
//!      lower_i <= x_i <= upper_i
//! ```
//!
//! with `a_i = +1` or `-1`. Each equality constraint touches a single group,
//! so the solver repeatedly optimizes a pair of variables from the same
//! group in closed form (sequential minimal optimization). The group
//! multipliers are the per-task biases.

use std::borrow::Cow;

use ndarray::Array2;
use thiserror::Error;


#[derive(Debug, Error, Clone)]
pub enum QpError {
    #[error("problem dimensions disagree: {0}")]
    Shape(String),
    #[error("lower bound {lower} exceeds upper bound {upper} at variable {index}")]
    EmptyBox { index: usize, lower: f64, upper: f64 },
    #[error("constraint coefficient at variable {index} is {value}, expected +1 or -1")]
    BadSign { index: usize, value: f64 },
    #[error("group {group} has no variables")]
    MissingGroup { group: usize },
    #[error("ill-posed problem: {0}")]
    IllPosed(String),
    #[error("initial point violates the constraints: {0}")]
    Infeasible(String),
    #[error("no convergence after {iterations} pair updates (violation {residual:.3e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: Box<QpSolution>,
    },
}

/// Read access to the quadratic term.
pub trait QMatrix: Sync {
    fn dim(&self) -> usize;
    fn get(&self, i: usize, j: usize) -> f64;
    /// Column `i` (equal to row `i` for symmetric matrices).
    fn column(&self, i: usize) -> Cow<'_, [f64]>;

    fn diag(&self, i: usize) -> f64 {
        self.get(i, i)
    }

    /// `out += s * Q[:, i]`.
    fn add_column(&self, i: usize, s: f64, out: &mut [f64]) {
        for (o, q) in out.iter_mut().zip(self.column(i).iter()) {
            *o += s * q;
        }
    }

    /// `out[k] += s * Q[k, i]` for every `k` in `rows`.
    fn add_column_at(&self, i: usize, s: f64, rows: &[usize], out: &mut [f64]) {
        let col = self.column(i);
        for &k in rows {
            out[k] += s * col[k];
        }
    }

    /// Some `(i, j, minor)` with a clearly negative 2x2 principal minor.
    fn negative_minor(&self) -> Option<(usize, usize, f64)> {
        let n = self.dim();
        let diag: Vec<f64> = (0..n).map(|i| self.diag(i)).collect();
        for i in 0..n {
            let col = self.column(i);
            for j in 0..i {
                let minor = diag[i] * diag[j] - col[j] * col[j];
                if minor < -1e-8 * (diag[i] * diag[j]).max(col[j] * col[j]).max(1e-300) {
                    return Some((j, i, minor));
                }
            }
        }
        None
    }

    /// Largest `|Q_ij - Q_ji|` relative to the largest entry.
    fn asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut scale = 0.0f64;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..=i {
                let a = self.get(i, j);
                let b = self.get(j, i);
                scale = scale.max(a.abs());
                worst = worst.max((a - b).abs());
            }
        }
        if scale > 0.0 {
            worst / scale
        } else {
            0.0
        }
    }
}

impl QMatrix for Array2<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self[[i, j]]
    }

    fn column(&self, i: usize) -> Cow<'_, [f64]> {
        match self.row(i).to_slice() {
            Some(s) => Cow::Borrowed(s),
            None => Cow::Owned(self.row(i).to_vec()),
        }
    }

    fn add_column(&self, i: usize, s: f64, out: &mut [f64]) {
        match self.row(i).to_slice() {
            Some(row) => out.iter_mut().zip(row).for_each(|(o, q)| *o += s * q),
            None => out.iter_mut().zip(self.row(i)).for_each(|(o, q)| *o += s * q),
        }
    }

    fn add_column_at(&self, i: usize, s: f64, rows: &[usize], out: &mut [f64]) {
        let row = self.row(i);
        for &k in rows {
            out[k] += s * row[k];
        }
    }
}

impl<M: QMatrix + ?Sized> QMatrix for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn get(&self, i: usize, j: usize) -> f64 {
        (**self).get(i, j)
    }
    fn column(&self, i: usize) -> Cow<'_, [f64]> {
        (**self).column(i)
    }
    fn diag(&self, i: usize) -> f64 {
        (**self).diag(i)
    }
    fn add_column(&self, i: usize, s: f64, out: &mut [f64]) {
        (**self).add_column(i, s, out)
    }
    fn add_column_at(&self, i: usize, s: f64, rows: &[usize], out: &mut [f64]) {
        (**self).add_column_at(i, s, rows, out)
    }
    fn negative_minor(&self) -> Option<(usize, usize, f64)> {
        (**self).negative_minor()
    }
    fn asymmetry(&self) -> f64 {
        (**self).asymmetry()
    }
}

/// `[[Q, -Q], [-Q, Q]]` without materializing it; the quadratic term of
/// the split ε-SVR problem in `(α, α*)`.
#[derive(Debug, Clone)]
pub struct SplitMatrix<M> {
    base: M,
}

impl<M: QMatrix> SplitMatrix<M> {
    pub fn new(base: M) -> Self {
        SplitMatrix { base }
    }

    pub fn base(&self) -> &M {
        &self.base
    }
}

impl<M: QMatrix> QMatrix for SplitMatrix<M> {
    fn dim(&self) -> usize {
        2 * self.base.dim()
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        let m = self.base.dim();
        let v = self.base.get(i % m, j % m);
        if (i < m) == (j < m) {
            v
        } else {
            -v
        }
    }

    fn column(&self, i: usize) -> Cow<'_, [f64]> {
        let m = self.base.dim();
        let col = self.base.column(i % m);
        let sign = if i < m { 1.0 } else { -1.0 };
        let mut out = Vec::with_capacity(2 * m);
        out.extend(col.iter().map(|v| sign * v));
        out.extend(col.iter().map(|v| -sign * v));
        Cow::Owned(out)
    }

    fn diag(&self, i: usize) -> f64 {
        self.base.diag(i % self.base.dim())
    }

    fn add_column(&self, i: usize, s: f64, out: &mut [f64]) {
        let m = self.base.dim();
        let s = if i < m { s } else { -s };
        let (top, bottom) = out.split_at_mut(m);
        self.base.add_column(i % m, s, top);
        self.base.add_column(i % m, -s, bottom);
    }

    fn add_column_at(&self, i: usize, s: f64, rows: &[usize], out: &mut [f64]) {
        let m = self.base.dim();
        let s = if i < m { s } else { -s };
        let col = self.base.column(i % m);
        for &k in rows {
            out[k] += if k < m { s } else { -s } * col[k % m];
        }
    }

    fn negative_minor(&self) -> Option<(usize, usize, f64)> {
        // Minors that mix the two halves are either base minors or exactly zero.
        self.base.negative_minor()
    }

    fn asymmetry(&self) -> f64 {
        self.base.asymmetry()
    }
}

/// A QP in maximization form `-1/2 x^T Q x + c^T x`.
#[derive(Debug, Clone)]
pub struct QpProblem<M> {
    pub q: M,
    pub c: Vec<f64>,
    /// Equality coefficients `a_i`, each `+1` or `-1`.
    pub signs: Vec<f64>,
    /// Equality group of every variable.
    pub groups: Vec<usize>,
    pub n_groups: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl<M: QMatrix> QpProblem<M> {
    pub fn new(
        q: M,
        c: Vec<f64>,
        signs: Vec<f64>,
        groups: Vec<usize>,
        n_groups: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self, QpError> {
        let p = QpProblem {
            q,
            c,
            signs,
            groups,
            n_groups,
            lower,
            upper,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let m = self.q.dim();
        for (name, len) in [
            ("c", self.c.len()),
            ("signs", self.signs.len()),
            ("groups", self.groups.len()),
            ("lower", self.lower.len()),
            ("upper", self.upper.len()),
        ] {
            if len != m {
                return Err(QpError::Shape(format!("Q is {m}x{m} but {name} has length {len}")));
            }
        }
        for i in 0..m {
            if !(self.lower[i] <= self.upper[i]) {
                return Err(QpError::EmptyBox {
                    index: i,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
            if self.signs[i] != 1.0 && self.signs[i] != -1.0 {
                return Err(QpError::BadSign {
                    index: i,
                    value: self.signs[i],
                });
            }
            if self.groups[i] >= self.n_groups {
                return Err(QpError::Shape(format!(
                    "variable {i} in group {} but only {} groups",
                    self.groups[i], self.n_groups
                )));
            }
        }
        Ok(())
    }

    /// Max-form objective `-1/2 x^T Q x + c^T x`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let g = self.min_gradient(x);
        // f_min = 1/2 x^T (Q x) - c^T x = 1/2 x^T (g - c)
        let f_min: f64 = x
            .iter()
            .zip(g.iter().zip(&self.c))
            .map(|(xi, (gi, ci))| 0.5 * xi * (gi - ci))
            .sum();
        -f_min
    }

    /// Gradient of the minimization form, `Q x - c`.
    pub fn min_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = self.c.iter().map(|c| -c).collect();
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                self.q.add_column(j, xj, &mut g);
            }
        }
        g
    }

    /// `sum_{i in g} a_i x_i` for every group.
    pub fn group_sums(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.n_groups];
        for i in 0..x.len() {
            s[self.groups[i]] += self.signs[i] * x[i];
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    /// Stop once the largest violating-pair gap of every group is below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Feasible starting point; zero when absent.
    pub initial: Option<Vec<f64>>,
    /// Variables within this distance of a bound count as bound-active
    /// during bias recovery.
    pub free_tol: f64,
    pub record_objective: bool,
    /// Periodically run conjugate gradients on the current free face.
    pub polish: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: 1e-6,
            max_iter: 100_000,
            initial: None,
            free_tol: 1e-12,
            record_objective: false,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// One multiplier per group; these are the biases `b_t`.
    pub group_multipliers: Vec<f64>,
    /// Largest violating-pair gap over all groups at the returned point.
    pub kkt_residual: f64,
    /// Max-form objective value.
    pub objective: f64,
    pub iterations: usize,
    /// Groups whose bias came from the bound-interval midpoint.
    pub fallback_groups: Vec<usize>,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRecovery {
    pub biases: Vec<f64>,
    pub fallback_groups: Vec<usize>,
}

const TAU: f64 = 1e-12;

#[derive(Clone, Copy)]
struct Candidate {
    index: usize,
    value: f64,
}

#[inline]
fn in_low(a: f64, x: f64, lo: f64, hi: f64) -> bool {
    if a > 0.0 {
        x > lo
    } else {
        x < hi
    }
}

/// Solves the QP. The working pair is the group with the largest KKT gap;
/// `i` is its maximal violator and `j` maximizes the second-order gain
/// among the variables violating against `i`. Ties go to the lowest index.
pub fn solve_qp<M: QMatrix>(p: &QpProblem<M>, opts: &QpOptions) -> Result<QpSolution, QpError> {
    p.validate()?;
    let m = p.dim();
    let asym = p.q.asymmetry();
    if asym > 1e-10 {
        return Err(QpError::IllPosed(format!("Q is not symmetric (relative asymmetry {asym:.2e})")));
    }
    let diag: Vec<f64> = (0..m).map(|i| p.q.diag(i)).collect();
    let diag_scale = diag.iter().fold(0.0f64, |a, &d| a.max(d.abs()));
    if let Some(i) = diag.iter().position(|&d| d < -1e-10 * diag_scale.max(1.0)) {
        return Err(QpError::IllPosed(format!("negative diagonal entry Q[{i},{i}] = {}", diag[i])));
    }
    // Cheap necessary condition for PSD: every 2x2 principal minor is nonnegative.
    if let Some((i, j, minor)) = p.q.negative_minor() {
        return Err(QpError::IllPosed(format!("Q is not PSD: 2x2 minor ({i}, {j}) is {minor:.3e}")));
    }

    let mut members = vec![Vec::new(); p.n_groups];
    for (i, &g) in p.groups.iter().enumerate() {
        members[g].push(i);
    }

    let mut x = match &opts.initial {
        Some(x0) => {
            if x0.len() != m {
                return Err(QpError::Shape(format!("initial point has length {} not {m}", x0.len())));
            }
            for i in 0..m {
                if x0[i] < p.lower[i] || x0[i] > p.upper[i] {
                    return Err(QpError::Infeasible(format!("x[{i}] = {} outside box", x0[i])));
                }
            }
            let scale = x0.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            if let Some((g, s)) = p
                .group_sums(x0)
                .into_iter()
                .enumerate()
                .find(|(_, s)| s.abs() > 1e-10 * scale)
            {
                return Err(QpError::Infeasible(format!("group {g} sums to {s}")));
            }
            x0.clone()
        }
        None => {
            if let Some(i) = (0..m).find(|&i| p.lower[i] > 0.0 || p.upper[i] < 0.0) {
                return Err(QpError::Infeasible(format!("zero start lies outside the box at {i}")));
            }
            vec![0.0; m]
        }
    };

    let mut grad = p.min_gradient(&x);
    let mut f_min: f64 = x
        .iter()
        .zip(grad.iter().zip(&p.c))
        .map(|(xi, (gi, ci))| 0.5 * xi * (gi - ci))
        .sum();
    let mut trace = Vec::new();
    if opts.record_objective {
        trace.push(-f_min);
    }

    let n_groups = p.n_groups;
    let mut up_val = vec![f64::NEG_INFINITY; n_groups];
    let mut up_idx = vec![usize::MAX; n_groups];
    let mut low_min = vec![f64::INFINITY; n_groups];

    // Shrinking: bound variables that cannot form a violating pair with
    // anything in their group are set aside. Their gradient entries go stale
    // and are rebuilt before the final optimality check.
    let mut active: Vec<usize> = (0..m).collect();
    let mut is_active = vec![true; m];
    let shrink_every = m.clamp(100, 1000);
    let mut next_shrink = shrink_every;
    let mut unshrunk = false;

    let mut iterations = 0usize;
    let polish_every = m.clamp(300, 1000);
    let mut next_polish = polish_every;
    let mut polishes = 0usize;
    let mut gap;
    loop {
        // Maximal violator and smallest partner value per group.
        up_val.fill(f64::NEG_INFINITY);
        up_idx.fill(usize::MAX);
        low_min.fill(f64::INFINITY);
        for &i in &active {
            let g = p.groups[i];
            let a = p.signs[i];
            let v = -a * grad[i];
            let (lo, hi, xi) = (p.lower[i], p.upper[i], x[i]);
            let (can_up, can_low) = if a > 0.0 { (xi < hi, xi > lo) } else { (xi > lo, xi < hi) };
            if can_up && v > up_val[g] {
                up_val[g] = v;
                up_idx[g] = i;
            }
            if can_low && v < low_min[g] {
                low_min[g] = v;
            }
        }
        let mut best_group: Option<(usize, Candidate)> = None;
        gap = 0.0f64;
        for g in 0..n_groups {
            if up_idx[g] != usize::MAX {
                let gg = up_val[g] - low_min[g];
                if gg > gap {
                    gap = gg;
                    best_group = Some((
                        g,
                        Candidate {
                            index: up_idx[g],
                            value: up_val[g],
                        },
                    ));
                }
            }
        }
        let shrunk = active.len() < m;
        if shrunk && (gap <= opts.tol || (!unshrunk && gap <= 10.0 * opts.tol)) {
            unshrunk = true;
            grad = p.min_gradient(&x);
            active = (0..m).collect();
            is_active.fill(true);
            next_shrink = iterations + shrink_every;
            continue;
        }
        if gap <= opts.tol {
            break;
        }
        if iterations >= opts.max_iter {
            if shrunk {
                grad = p.min_gradient(&x);
            }
            let sol = finish(p, x, &grad, f_min, gap, iterations, opts, trace);
            return Err(QpError::NotConverged {
                iterations,
                residual: gap,
                best: Box::new(sol),
            });
        }
        if iterations >= next_shrink {
            next_shrink = iterations + shrink_every;
            active.retain(|&i| {
                let g = p.groups[i];
                let a = p.signs[i];
                let v = -a * grad[i];
                let (lo, hi, xi) = (p.lower[i], p.upper[i], x[i]);
                let (can_up, can_low) = if a > 0.0 { (xi < hi, xi > lo) } else { (xi > lo, xi < hi) };
                let keep = match (can_up, can_low) {
                    (true, true) => true,
                    (true, false) => v >= low_min[g],
                    (false, true) => v <= up_val[g],
                    (false, false) => false,
                };
                is_active[i] = keep;
                keep
            });
        }
        if opts.polish && iterations >= next_polish {
            next_polish = iterations + polish_every;
            if face_cg(p, &mut x, &mut grad, &mut f_min, 0.5 * opts.tol) {
                polishes += 1;
                if opts.record_objective {
                    trace.push(-f_min);
                }
                continue;
            }
        }
        let (g, ci) = best_group.expect("positive gap implies a violating group");
        let i = ci.index;
        let ai = p.signs[i];

        // Second-order choice of j within the group.
        let mut best_j: Option<(usize, f64, f64)> = None; // (j, gain, curvature)
        for &j in &members[g] {
            if !is_active[j] || !in_low(p.signs[j], x[j], p.lower[j], p.upper[j]) {
                continue;
            }
            let vj = -p.signs[j] * grad[j];
            let b = ci.value - vj;
            if b <= 0.0 {
                continue;
            }
            let curv = diag[i] + diag[j] - 2.0 * ai * p.signs[j] * p.q.get(i, j);
            let gain = b * b / curv.max(TAU);
            if best_j.is_none_or(|(_, bg, _)| gain > bg) {
                best_j = Some((j, gain, curv));
            }
        }
        let (j, _, curv) = best_j.expect("positive gap implies a partner");
        let aj = p.signs[j];
        let b = ci.value + aj * grad[j];

        let room_i = if ai > 0.0 { p.upper[i] - x[i] } else { x[i] - p.lower[i] };
        let room_j = if aj > 0.0 { x[j] - p.lower[j] } else { p.upper[j] - x[j] };
        let room = room_i.min(room_j);
        let delta = if curv > TAU {
            (b / curv).min(room)
        } else {
            let scale = diag[i].abs() + diag[j].abs() + 1e-300;
            if curv < -1e-8 * scale {
                return Err(QpError::IllPosed(format!(
                    "negative curvature {curv:.3e} on pair ({i}, {j}); Q is not PSD"
                )));
            }
            if !room.is_finite() {
                return Err(QpError::IllPosed("unbounded direction with zero curvature".into()));
            }
            room
        };

        let old_i = x[i];
        let old_j = x[j];
        x[i] = if delta == room_i {
            if ai > 0.0 { p.upper[i] } else { p.lower[i] }
        } else {
            old_i + ai * delta
        };
        x[j] = if delta == room_j {
            if aj > 0.0 { p.lower[j] } else { p.upper[j] }
        } else {
            old_j - aj * delta
        };
        let di = x[i] - old_i;
        let dj = x[j] - old_j;
        f_min += -b * delta + 0.5 * curv * delta * delta;

        if active.len() == m {
            p.q.add_column(i, di, &mut grad);
            p.q.add_column(j, dj, &mut grad);
        } else {
            p.q.add_column_at(i, di, &active, &mut grad);
            p.q.add_column_at(j, dj, &active, &mut grad);
        }
        iterations += 1;
        if opts.record_objective {
            trace.push(-f_min);
        }
    }

    log::trace!("qp: {iterations} pair updates, {polishes} face steps, gap {gap:.3e}");
    Ok(finish(p, x, &grad, f_min, gap, iterations, opts, trace))
}

const FACE_MAX_FREE: usize = 3000;
const FACE_MAX_CG: usize = 2000;

/// Conjugate gradients on the current free face. Bound variables stay fixed
/// and the group equalities hold along every direction, since each one is
/// projected onto `sum_{i in g} a_i d_i = 0`. A variable that reaches its
/// bound leaves the face and CG restarts on the rest. Singular `Q_FF` is
/// fine: a direction of zero curvature runs to the nearest bound.
///
/// Returns whether the point moved.
fn face_cg<M: QMatrix>(p: &QpProblem<M>, x: &mut [f64], grad: &mut [f64], f_min: &mut f64, tol: f64) -> bool {
    let free: Vec<usize> = (0..x.len()).filter(|&i| x[i] > p.lower[i] && x[i] < p.upper[i]).collect();
    let k = free.len();
    if k < 2 || k > FACE_MAX_FREE {
        return false;
    }
    let mut local = vec![usize::MAX; p.n_groups];
    let mut n_local = 0;
    let mut grp = Vec::with_capacity(k);
    for &i in &free {
        let g = p.groups[i];
        if local[g] == usize::MAX {
            local[g] = n_local;
            n_local += 1;
        }
        grp.push(local[g]);
    }
    let sign: Vec<f64> = free.iter().map(|&i| p.signs[i]).collect();
    let mut qff = Array2::<f64>::zeros((k, k));
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            qff[[a, b]] = p.q.get(i, j);
        }
    }
    let scale = (0..k).fold(0.0f64, |s, a| s.max(qff[[a, a]].abs())).max(f64::MIN_POSITIVE);

    let mut active = vec![true; k];
    let mut sums = vec![0.0; n_local];
    let mut counts = vec![0usize; n_local];
    let project = |v: &mut [f64], active: &[bool], sums: &mut [f64], counts: &mut [usize]| {
        sums.fill(0.0);
        counts.fill(0);
        for a in 0..k {
            if active[a] {
                sums[grp[a]] += sign[a] * v[a];
                counts[grp[a]] += 1;
            } else {
                v[a] = 0.0;
            }
        }
        for a in 0..k {
            if active[a] {
                let g = grp[a];
                v[a] -= sign[a] * sums[g] / counts[g] as f64;
            }
        }
    };

    let g0: Vec<f64> = free.iter().map(|&i| grad[i]).collect();
    let mut disp = vec![0.0; k];
    // r = -(g_F + Q_FF disp), kept in step with disp.
    let mut r: Vec<f64> = g0.iter().map(|g| -g).collect();
    let mut moved = false;
    let mut cg_iters = 0;
    'restart: while cg_iters < FACE_MAX_CG {
        let mut z = r.clone();
        project(&mut z, &active, &mut sums, &mut counts);
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut dir = z.clone();
        loop {
            if z.iter().fold(0.0f64, |s, v| s.max(v.abs())) <= tol || cg_iters >= FACE_MAX_CG {
                break 'restart;
            }
            cg_iters += 1;
            let qd = qff.dot(&ndarray::ArrayView1::from(&dir[..]));
            let curv: f64 = qd.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let dd: f64 = dir.iter().map(|v| v * v).sum();
            let step = if curv > 1e-12 * scale * dd { rz / curv } else { f64::INFINITY };
            let mut limit = None;
            let mut t = step;
            for a in 0..k {
                if !active[a] || dir[a] == 0.0 {
                    continue;
                }
                let i = free[a];
                let xa = x[i] + disp[a];
                let room = if dir[a] > 0.0 { (p.upper[i] - xa) / dir[a] } else { (p.lower[i] - xa) / dir[a] };
                if room < t {
                    t = room;
                    limit = Some(a);
                }
            }
            if !t.is_finite() {
                // Unbounded descent along a flat direction; leave it to SMO.
                break 'restart;
            }
            let t = t.max(0.0);
            for a in 0..k {
                disp[a] += t * dir[a];
                r[a] -= t * qd[a];
            }
            moved |= t > 0.0;
            if let Some(a) = limit {
                let i = free[a];
                disp[a] = if dir[a] > 0.0 { p.upper[i] } else { p.lower[i] } - x[i];
                active[a] = false;
                continue 'restart;
            }
            let mut z_new = r.clone();
            project(&mut z_new, &active, &mut sums, &mut counts);
            let rz_new: f64 = r.iter().zip(&z_new).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for a in 0..k {
                dir[a] = z_new[a] + beta * dir[a];
            }
            // rounding in the recurrence would otherwise leak off the face
            project(&mut dir, &active, &mut sums, &mut counts);
            z = z_new;
        }
    }
    if !moved {
        return false;
    }
    // Commit only if the group sums survived; otherwise SMO carries on.
    let targets: Vec<f64> = free
        .iter()
        .zip(&disp)
        .map(|(&i, d)| (x[i] + d).clamp(p.lower[i], p.upper[i]))
        .collect();
    let mut drift = vec![0.0; n_local];
    let mut size = 1.0f64;
    for (a, &i) in free.iter().enumerate() {
        drift[grp[a]] += sign[a] * (targets[a] - x[i]);
        size = size.max(targets[a].abs());
    }
    if drift.iter().any(|d| d.abs() > 1e-12 * size) {
        return false;
    }
    let disp: Vec<f64> = free.iter().zip(&targets).map(|(&i, t)| t - x[i]).collect();
    let qd = qff.dot(&ndarray::ArrayView1::from(&disp[..]));
    let lin: f64 = g0.iter().zip(&disp).map(|(g, d)| g * d).sum();
    let quad: f64 = qd.iter().zip(&disp).map(|(a, b)| a * b).sum();
    for (a, &i) in free.iter().enumerate() {
        x[i] = targets[a];
        if disp[a] != 0.0 {
            p.q.add_column(i, disp[a], grad);
        }
    }
    *f_min += lin + 0.5 * quad;
    true
}

#[allow(clippy::too_many_arguments)]
fn finish<M: QMatrix>(
    p: &QpProblem<M>,
    x: Vec<f64>,
    grad: &[f64],
    f_min: f64,
    gap: f64,
    iterations: usize,
    opts: &QpOptions,
    objective_trace: Vec<f64>,
) -> QpSolution {
    let rec = biases_from_gradient(p, &x, grad, opts.free_tol);
    QpSolution {
        x,
        group_multipliers: rec.biases,
        kkt_residual: gap,
        objective: -f_min,
        iterations,
        fallback_groups: rec.fallback_groups,
        objective_trace,
    }
}

/// Per-group bias from the KKT conditions at `solution.x`.
///
/// Free variables each imply `b = -a_i * (Qx - c)_i`; their mean is used.
/// A group without free variables takes the midpoint of the interval the
/// bound-active variables allow.
pub fn recover_bias<M: QMatrix>(
    solution: &QpSolution,
    problem: &QpProblem<M>,
    free_tol: f64,
) -> Result<BiasRecovery, QpError> {
    problem.validate()?;
    let mut seen = vec![false; problem.n_groups];
    for &g in &problem.groups {
        seen[g] = true;
    }
    if let Some(group) = seen.iter().position(|s| !s) {
        return Err(QpError::MissingGroup { group });
    }
    let grad = problem.min_gradient(&solution.x);
    Ok(biases_from_gradient(problem, &solution.x, &grad, free_tol))
}

fn biases_from_gradient<M: QMatrix>(p: &QpProblem<M>, x: &[f64], grad: &[f64], free_tol: f64) -> BiasRecovery {
    let n = p.n_groups;
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    // bounds on rho = -b
    let mut ub = vec![f64::INFINITY; n];
    let mut lb = vec![f64::NEG_INFINITY; n];
    for i in 0..x.len() {
        let g = p.groups[i];
        let a = p.signs[i];
        let r = a * grad[i];
        let at_upper = x[i] >= p.upper[i] - free_tol;
        let at_lower = x[i] <= p.lower[i] + free_tol;
        match (at_lower, at_upper) {
            (true, true) => {}
            (false, true) => {
                if a < 0.0 {
                    ub[g] = ub[g].min(r);
                } else {
                    lb[g] = lb[g].max(r);
                }
            }
            (true, false) => {
                if a > 0.0 {
                    ub[g] = ub[g].min(r);
                } else {
                    lb[g] = lb[g].max(r);
                }
            }
            (false, false) => {
                sum[g] += r;
                count[g] += 1;
            }
        }
    }
    let mut fallback_groups = Vec::new();
    let biases = (0..n)
        .map(|g| {
            let rho = if count[g] > 0 {
                sum[g] / count[g] as f64
            } else {
                fallback_groups.push(g);
                match (lb[g].is_finite(), ub[g].is_finite()) {
                    (true, true) => 0.5 * (lb[g] + ub[g]),
                    (true, false) => lb[g],
                    (false, true) => ub[g],
                    (false, false) => 0.0,
                }
            };
            -rho
        })
        .collect();
    BiasRecovery {
        biases,
        fallback_groups,
    }
}

/// The ε-SVR dual in `λ`:
///
/// ```text
/// max -1/2 λ^T Q λ + y^T λ - ε ||λ||_1
/// s.t. sum_{i in g} λ_i = 0,  -C <= λ_i <= C
/// ```
#[derive(Debug, Clone)]
pub struct LambdaProblem<M> {
    pub q: M,
    pub y: Vec<f64>,
    pub epsilon: f64,
    pub c: f64,
    pub groups: Vec<usize>,
    pub n_groups: usize,
}

impl<M: QMatrix> LambdaProblem<M> {
    pub fn objective(&self, lambda: &[f64]) -> f64 {
        let mut quad = 0.0;
        for (i, &li) in lambda.iter().enumerate() {
            if li != 0.0 {
                let col = self.q.column(i);
                quad += li * col.iter().zip(lambda).map(|(q, l)| q * l).sum::<f64>();
            }
        }
        let lin: f64 = lambda.iter().zip(&self.y).map(|(l, y)| l * y - self.epsilon * l.abs()).sum();
        -0.5 * quad + lin
    }
}

/// Splits `λ = α - α*` with `α, α* ∈ [0, C]`, turning the `-ε|λ|` term into
/// the linear coefficients `y - ε` on `α` and `-y - ε` on `α*`.
pub fn svr_split<M: QMatrix>(lp: LambdaProblem<M>) -> Result<QpProblem<SplitMatrix<M>>, QpError> {
    let m = lp.y.len();
    if lp.q.dim() != m || lp.groups.len() != m {
        return Err(QpError::Shape(format!(
            "Q is {0}x{0}, y has {m} entries, groups {1}",
            lp.q.dim(),
            lp.groups.len()
        )));
    }
    if !(lp.epsilon >= 0.0) || !(lp.c > 0.0) {
        return Err(QpError::IllPosed(format!("need ε >= 0 and C > 0 (ε = {}, C = {})", lp.epsilon, lp.c)));
    }
    let mut c = Vec::with_capacity(2 * m);
    c.extend(lp.y.iter().map(|y| y - lp.epsilon));
    c.extend(lp.y.iter().map(|y| -y - lp.epsilon));
    let mut signs = vec![1.0; m];
    signs.extend(std::iter::repeat_n(-1.0, m));
    let mut groups = lp.groups.clone();
    groups.extend_from_slice(&lp.groups);
    QpProblem::new(
        SplitMatrix::new(lp.q),
        c,
        signs,
        groups,
        lp.n_groups,
        vec![0.0; 2 * m],
        vec![lp.c; 2 * m],
    )
}

/// `λ = α - α*` from a split solution vector `[α; α*]`.
pub fn merge_split(x: &[f64]) -> Vec<f64> {
    let m = x.len() / 2;
    (0..m).map(|i| x[i] - x[m + i]).collect()
}

/// Clips a previous dual iterate into the current box. Groups whose
/// equality constraint no longer holds after clipping restart from zero.
pub fn project_warm_start<M: QMatrix>(previous: &[f64], p: &QpProblem<M>) -> Option<Vec<f64>> {
    if previous.len() != p.dim() {
        return None;
    }
    let mut x: Vec<f64> = previous
        .iter()
        .zip(p.lower.iter().zip(&p.upper))
        .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
        .collect();
    let scale = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let sums = p.group_sums(&x);
    for (i, xi) in x.iter_mut().enumerate() {
        if sums[p.groups[i]].abs() > 1e-10 * scale {
            *xi = 0.0;
        }
    }
    Some(x)
}
