//! Task-grid index algebra and CP factor bookkeeping.
//!
//! Tasks live on an `N`-way grid of shape `[T1, ..., TN]`. Externally a task
//! is addressed either by its flat id `t` in `[0, T)` or by a 1-based
//! multi-index `(t1, ..., tN)`; the two are related by the little-endian
//! rule
//!
//! ```text
//! t = (t1 - 1) + (t2 - 1) T1 + ... + (tN - 1) T1 ... T(N-1)
//! ```
//!
//! Modes (axes of the grid) are addressed 0-based.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::KernelSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("task grid must have at least one mode")]
    EmptyGrid,
    #[error("mode {mode} has size 0; every mode needs at least one slice")]
    ZeroMode { mode: usize },
    #[error("multi-index has {got} entries but the grid has {expected} modes")]
    WrongArity { expected: usize, got: usize },
    #[error("index {value} out of range 1..={size} in mode {mode}")]
    OutOfRange { mode: usize, value: usize, size: usize },
    #[error("flat task id {task} out of range (grid has {total} tasks)")]
    TaskOutOfRange { task: usize, total: usize },
    #[error("mode {mode} does not exist (grid has {modes} modes)")]
    InvalidMode { mode: usize, modes: usize },
    #[error("factor {mode} has shape {rows}x{cols}, expected {expected_rows}x{rank}")]
    FactorShape {
        mode: usize,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        rank: usize,
    },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("factor {mode} contains a non-finite entry")]
    NonFinite { mode: usize },
    #[error("explicit weights need a linear kernel, got {0}")]
    UnsupportedKernel(String),
    #[error("dual factor has {anchors} anchors but {coeffs} coefficients")]
    AnchorMismatch { anchors: usize, coeffs: usize },
}

/// Shape of the task grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TaskGrid {
    shape: Vec<usize>,
    strides: Vec<usize>,
    total: usize,
}

impl TryFrom<Vec<usize>> for TaskGrid {
    type Error = IndexError;
    fn try_from(shape: Vec<usize>) -> Result<Self, IndexError> {
        TaskGrid::new(shape)
    }
}

impl From<TaskGrid> for Vec<usize> {
    fn from(grid: TaskGrid) -> Self {
        grid.shape
    }
}

impl TaskGrid {
    pub fn new(shape: Vec<usize>) -> Result<Self, IndexError> {
        if shape.is_empty() {
            return Err(IndexError::EmptyGrid);
        }
        if let Some(mode) = shape.iter().position(|&s| s == 0) {
            return Err(IndexError::ZeroMode { mode });
        }
        let mut strides = Vec::with_capacity(shape.len());
        let mut acc = 1usize;
        for &s in &shape {
            strides.push(acc);
            acc *= s;
        }
        Ok(TaskGrid {
            shape,
            strides,
            total: acc,
        })
    }

    /// A grid with a single mode of `tasks` slices.
    pub fn flat(tasks: usize) -> Result<Self, IndexError> {
        TaskGrid::new(vec![tasks])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn modes(&self) -> usize {
        self.shape.len()
    }

    /// Total number of tasks `T = prod(shape)`.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Maps a 1-based multi-index to the 0-based flat task id.
    pub fn linearize(&self, multi: &[usize]) -> Result<usize, IndexError> {
        if multi.len() != self.shape.len() {
            return Err(IndexError::WrongArity {
                expected: self.shape.len(),
                got: multi.len(),
            });
        }
        let mut t = 0;
        for (mode, ((&value, &size), &stride)) in
            multi.iter().zip(&self.shape).zip(&self.strides).enumerate()
        {
            if value == 0 || value > size {
                return Err(IndexError::OutOfRange { mode, value, size });
            }
            t += (value - 1) * stride;
        }
        Ok(t)
    }

    /// Inverse of [`TaskGrid::linearize`]; returns 1-based indices.
    pub fn delinearize(&self, task: usize) -> Result<Vec<usize>, IndexError> {
        self.check_task(task)?;
        Ok((0..self.modes()).map(|n| self.index_in_mode(task, n) + 1).collect())
    }

    /// 0-based position of `task` along `mode`. Callers must pass valid ids.
    #[inline]
    pub(crate) fn index_in_mode(&self, task: usize, mode: usize) -> usize {
        (task / self.strides[mode]) % self.shape[mode]
    }

    pub fn check_task(&self, task: usize) -> Result<(), IndexError> {
        if task >= self.total {
            Err(IndexError::TaskOutOfRange {
                task,
                total: self.total,
            })
        } else {
            Ok(())
        }
    }

    pub fn check_mode(&self, mode: usize) -> Result<(), IndexError> {
        if mode >= self.modes() {
            Err(IndexError::InvalidMode {
                mode,
                modes: self.modes(),
            })
        } else {
            Ok(())
        }
    }

    /// Flat ids of every task whose index along `mode` equals `slice`
    /// (0-based slice), in ascending order.
    pub fn slice_tasks(&self, mode: usize, slice: usize) -> Result<Vec<usize>, IndexError> {
        self.check_mode(mode)?;
        if slice >= self.shape[mode] {
            return Err(IndexError::OutOfRange {
                mode,
                value: slice + 1,
                size: self.shape[mode],
            });
        }
        Ok((0..self.total)
            .filter(|&t| self.index_in_mode(t, mode) == slice)
            .collect())
    }
}

/// The task-indexed CP factors `U^1, ..., U^N`, each `T_n x R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpFactors {
    rank: usize,
    factors: Vec<Array2<f64>>,
    seed: Option<u64>,
}

impl CpFactors {
    pub fn from_matrices(grid: &TaskGrid, factors: Vec<Array2<f64>>) -> Result<Self, IndexError> {
        let rank = factors.first().map(|f| f.ncols()).unwrap_or(0);
        let cp = CpFactors {
            rank,
            factors,
            seed: None,
        };
        cp.validate(grid)?;
        Ok(cp)
    }

    /// I.i.d. standard normal entries from a seeded ChaCha stream.
    pub fn init(grid: &TaskGrid, rank: usize, seed: u64) -> Result<Self, IndexError> {
        if rank == 0 {
            return Err(IndexError::ZeroRank);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = grid
            .shape()
            .iter()
            .map(|&rows| {
                Array2::from_shape_simple_fn((rows, rank), || StandardNormal.sample(&mut rng))
            })
            .collect();
        Ok(CpFactors {
            rank,
            factors,
            seed: Some(seed),
        })
    }

    /// All-ones factors; every mixing vector is the all-ones vector.
    pub fn ones(grid: &TaskGrid, rank: usize) -> Result<Self, IndexError> {
        if rank == 0 {
            return Err(IndexError::ZeroRank);
        }
        Ok(CpFactors {
            rank,
            factors: grid
                .shape()
                .iter()
                .map(|&rows| Array2::ones((rows, rank)))
                .collect(),
            seed: None,
        })
    }

    pub fn validate(&self, grid: &TaskGrid) -> Result<(), IndexError> {
        if self.rank == 0 {
            return Err(IndexError::ZeroRank);
        }
        if self.factors.len() != grid.modes() {
            return Err(IndexError::WrongArity {
                expected: grid.modes(),
                got: self.factors.len(),
            });
        }
        for (mode, (f, &rows)) in self.factors.iter().zip(grid.shape()).enumerate() {
            if f.nrows() != rows || f.ncols() != self.rank {
                return Err(IndexError::FactorShape {
                    mode,
                    rows: f.nrows(),
                    cols: f.ncols(),
                    expected_rows: rows,
                    rank: self.rank,
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(IndexError::NonFinite { mode });
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn factor(&self, mode: usize) -> &Array2<f64> {
        &self.factors[mode]
    }

    pub fn factor_mut(&mut self, mode: usize) -> &mut Array2<f64> {
        &mut self.factors[mode]
    }

    pub fn factors(&self) -> &[Array2<f64>] {
        &self.factors
    }

    /// Rescales column `r` of every factor so that the squared column norms
    /// of all modes and `shared[r]` (the squared norm of column `r` of the
    /// shared factor) become their geometric mean. The shared factor is
    /// implicitly scaled by the inverse product, so every `L u_t` is
    /// unchanged while the sum of squared norms can only drop. Columns with
    /// a (near) zero norm anywhere are left alone. Returns the factor by
    /// which the shared column would be scaled.
    pub fn balance_columns(&mut self, shared: &[f64]) -> Vec<f64> {
        assert_eq!(shared.len(), self.rank, "one shared norm per column");
        let mut shared_scale = vec![1.0; self.rank];
        for (r, &s0) in shared.iter().enumerate() {
            let norms: Vec<f64> = self.factors.iter().map(|f| f.column(r).dot(&f.column(r))).collect();
            if s0 <= f64::MIN_POSITIVE || norms.iter().any(|&s| s <= f64::MIN_POSITIVE) {
                continue;
            }
            // geometric mean in log space
            let log_mean = (s0.ln() + norms.iter().map(|s| s.ln()).sum::<f64>()) / (norms.len() + 1) as f64;
            for (f, s) in self.factors.iter_mut().zip(&norms) {
                f.column_mut(r).mapv_inplace(|v| v * (0.5 * (log_mean - s.ln())).exp());
            }
            shared_scale[r] = (0.5 * (log_mean - s0.ln())).exp();
        }
        shared_scale
    }

    /// `u_t`: Hadamard product of the rows `U^n[t_n, :]` over all modes.
    pub fn mixing_vector(&self, task: usize, grid: &TaskGrid) -> Result<Array1<f64>, IndexError> {
        grid.check_task(task)?;
        let mut u = Array1::ones(self.rank);
        self.hadamard_rows_into(task, grid, None, u.as_slice_mut().unwrap());
        Ok(u)
    }

    /// Multiplies `out` in place by the factor rows of `task`, skipping
    /// `excluded` when given.
    pub(crate) fn hadamard_rows_into(
        &self,
        task: usize,
        grid: &TaskGrid,
        excluded: Option<usize>,
        out: &mut [f64],
    ) {
        for (mode, f) in self.factors.iter().enumerate() {
            if Some(mode) == excluded {
                continue;
            }
            let row = f.row(grid.index_in_mode(task, mode));
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o *= v;
            }
        }
    }

    /// `T x R` matrix whose row `t` is `u_t`.
    pub fn mixing_matrix(&self, grid: &TaskGrid) -> Array2<f64> {
        let mut g = Array2::ones((grid.total(), self.rank));
        for (t, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
            self.hadamard_rows_into(t, grid, None, row.as_slice_mut().unwrap());
        }
        g
    }

    /// `T x T` Gram of mixing vectors, entry `(t, q) = <u_t, u_q>`.
    pub fn relatedness_gram(&self, grid: &TaskGrid) -> Array2<f64> {
        let g = self.mixing_matrix(grid);
        let mut gram = g.dot(&g.t());
        symmetrize(&mut gram);
        gram
    }

    /// `sum_n ||self_n - other_n||_F^2 / ||other_n||_F^2`, with `other` the
    /// previous iterate.
    pub fn relative_change(&self, previous: &CpFactors) -> f64 {
        self.factors
            .iter()
            .zip(&previous.factors)
            .map(|(new, old)| {
                let diff: f64 = new.iter().zip(old.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                let norm: f64 = old.iter().map(|v| v * v).sum();
                if norm > 0.0 {
                    diff / norm
                } else if diff > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .sum()
    }
}

/// Copies the lower triangle onto the upper one so the result is exactly
/// symmetric.
pub(crate) fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            m[[j, i]] = m[[i, j]];
        }
    }
}

/// The shared factor `L` kept in kernel-compatible form:
/// `L = sum_p coeff_p * phi(x_p) * u_{q_p}^T`, one term per anchor sample
/// `x_p` belonging to task `q_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSharedFactor {
    pub anchors: Array2<f64>,
    pub anchor_tasks: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub kernel: KernelSpec,
}

impl DualSharedFactor {
    pub fn new(
        anchors: Array2<f64>,
        anchor_tasks: Vec<usize>,
        coeffs: Vec<f64>,
        kernel: KernelSpec,
    ) -> Result<Self, IndexError> {
        if anchors.nrows() != coeffs.len() || anchor_tasks.len() != coeffs.len() {
            return Err(IndexError::AnchorMismatch {
                anchors: anchors.nrows(),
                coeffs: coeffs.len(),
            });
        }
        Ok(DualSharedFactor {
            anchors,
            anchor_tasks,
            coeffs,
            kernel,
        })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }

    /// Per-anchor rows `coeff_p * u_{q_p}`, an `anchors x R` matrix. With
    /// kernel row `k_p = k(x_p, x)` the product `k^T A` equals `L^T phi(x)`.
    pub fn anchor_weights(&self, factors: &CpFactors, grid: &TaskGrid) -> Array2<f64> {
        let mixing = factors.mixing_matrix(grid);
        let mut a = Array2::zeros((self.len(), factors.rank()));
        for (p, mut row) in a.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&mixing.row(self.anchor_tasks[p]));
            row *= self.coeffs[p];
        }
        a
    }

    /// Materializes `L` (`d x R`); only defined for the linear kernel.
    pub fn explicit_l(&self, factors: &CpFactors, grid: &TaskGrid) -> Result<Array2<f64>, IndexError> {
        if !matches!(self.kernel, KernelSpec::Linear) {
            return Err(IndexError::UnsupportedKernel(self.kernel.to_string()));
        }
        Ok(self.anchors.t().dot(&self.anchor_weights(factors, grid)))
    }

    /// `w_t = L u_t` for every task, stacked as a `T x d` matrix.
    pub fn explicit_weights(
        &self,
        factors: &CpFactors,
        grid: &TaskGrid,
    ) -> Result<Array2<f64>, IndexError> {
        let l = self.explicit_l(factors, grid)?;
        Ok(factors.mixing_matrix(grid).dot(&l.t()))
    }
}

/// `<w_t, w_q>` Gram for the rows of `weights`.
pub fn weight_gram(weights: &Array2<f64>) -> Array2<f64> {
    let mut g = weights.dot(&weights.t());
    symmetrize(&mut g);
    g
}
