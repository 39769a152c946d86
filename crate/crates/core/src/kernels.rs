//! Kernel evaluation, the cached training Gram, and the task-weighted Gram.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cp::{symmetrize, CpFactors, DualSharedFactor, IndexError, TaskGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("rbf gamma must be positive and finite, got {0}")]
    InvalidGamma(f64),
    #[error("{samples} samples but {labels} labels/task ids")]
    LayoutMismatch { samples: usize, labels: usize },
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// `k(x, z) = <x, z>` or `k(x, z) = exp(-gamma ||x - z||^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn rbf(gamma: f64) -> Result<Self, KernelError> {
        let spec = KernelSpec::Rbf { gamma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        match *self {
            KernelSpec::Rbf { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(KernelError::InvalidGamma(gamma))
            }
            _ => Ok(()),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, KernelSpec::Linear)
    }

    pub fn eval(&self, x: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Result<f64, KernelError> {
        if x.len() != z.len() {
            return Err(KernelError::DimensionMismatch {
                left: x.len(),
                right: z.len(),
            });
        }
        Ok(self.eval_unchecked(x, z))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> f64 {
        match *self {
            KernelSpec::Linear => x.dot(&z),
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = x.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
        }
    }

    /// Cross-kernel matrix `K[i, j] = k(a_i, b_j)` between the rows of two
    /// sample matrices.
    pub fn cross(&self, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>, KernelError> {
        if a.ncols() != b.ncols() {
            return Err(KernelError::DimensionMismatch {
                left: a.ncols(),
                right: b.ncols(),
            });
        }
        let mut k = a.dot(&b.t()).as_standard_layout().into_owned();
        if let KernelSpec::Rbf { gamma } = *self {
            let na: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
            let nb: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
            for ((i, j), v) in k.indexed_iter_mut() {
                let d2 = (na[i] + nb[j] - 2.0 * *v).max(0.0);
                *v = (-gamma * d2).exp();
            }
        }
        Ok(k)
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Linear => write!(f, "linear"),
            KernelSpec::Rbf { gamma } => write!(f, "rbf(gamma={gamma})"),
        }
    }
}

/// `k(x, z)` with a dimension check.
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], z: &[f64]) -> Result<f64, KernelError> {
    spec.eval(ArrayView1::from(x), ArrayView1::from(z))
}

/// Dense kernel Gram over all training samples, tasks concatenated in
/// ascending task order. Immutable once built.
#[derive(Debug, Clone)]
pub struct GramCache {
    kernel: KernelSpec,
    gram: Array2<f64>,
    offsets: Vec<usize>,
}

impl GramCache {
    /// `features` holds the samples of task 0, then task 1, ...;
    /// `offsets[t]..offsets[t + 1]` is the row range of task `t`.
    pub fn build(kernel: KernelSpec, features: ArrayView2<'_, f64>, offsets: Vec<usize>) -> Result<Self, KernelError> {
        kernel.validate()?;
        let m = features.nrows();
        if offsets.last().copied() != Some(m) || offsets.first().copied() != Some(0) {
            return Err(KernelError::LayoutMismatch {
                samples: m,
                labels: offsets.last().copied().unwrap_or(0),
            });
        }
        let mut gram = kernel.cross(features, features)?;
        symmetrize(&mut gram);
        if let KernelSpec::Rbf { .. } = kernel {
            gram.diag_mut().fill(1.0);
        }
        Ok(GramCache {
            kernel,
            gram,
            offsets,
        })
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.gram
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.gram.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gram.nrows() == 0
    }

    /// Task id of every row.
    pub fn sample_tasks(&self) -> Vec<usize> {
        let mut tasks = Vec::with_capacity(self.len());
        for (t, w) in self.offsets.windows(2).enumerate() {
            tasks.extend(std::iter::repeat_n(t, w[1] - w[0]));
        }
        tasks
    }
}

/// `Q[j, j'] = y_j y_j' <u_t, u_q> k(x_j, x_j')` when `labels` is given
/// (classification), or without the label factors (regression).
pub fn weighted_gram_q(
    cache: &GramCache,
    factors: &CpFactors,
    grid: &TaskGrid,
    labels: Option<&[f64]>,
) -> Result<Array2<f64>, KernelError> {
    factors.validate(grid)?;
    if cache.offsets().len() != grid.total() + 1 {
        return Err(KernelError::LayoutMismatch {
            samples: cache.offsets().len().saturating_sub(1),
            labels: grid.total(),
        });
    }
    if let Some(y) = labels {
        if y.len() != cache.len() {
            return Err(KernelError::LayoutMismatch {
                samples: cache.len(),
                labels: y.len(),
            });
        }
    }
    let related = factors.relatedness_gram(grid);
    Ok(weighted_gram_with(cache, &related, labels))
}

/// Same as [`weighted_gram_q`] with a precomputed task relatedness Gram.
pub(crate) fn weighted_gram_with(cache: &GramCache, related: &Array2<f64>, labels: Option<&[f64]>) -> Array2<f64> {
    let tasks = cache.sample_tasks();
    let k = cache.matrix();
    let mut q = Array2::zeros(k.dim());
    for (i, (mut qrow, krow)) in q.axis_iter_mut(Axis(0)).zip(k.axis_iter(Axis(0))).enumerate() {
        let ti = tasks[i];
        let rel = related.row(ti);
        let qrow = qrow.as_slice_mut().unwrap();
        let krow = krow.as_slice().unwrap();
        match labels {
            Some(y) => {
                let yi = y[i];
                for j in 0..=i {
                    qrow[j] = yi * y[j] * rel[tasks[j]] * krow[j];
                }
            }
            None => {
                for j in 0..=i {
                    qrow[j] = rel[tasks[j]] * krow[j];
                }
            }
        }
    }
    symmetrize(&mut q);
    q
}

/// `L^T phi(x)` evaluated through the dual representation:
/// `sum_p coeff_p * u_{q_p} * k(x_p, x)`.
pub fn lphi(dual: &DualSharedFactor, factors: &CpFactors, grid: &TaskGrid, x: &[f64]) -> Result<Array1<f64>, KernelError> {
    if dual.is_empty() {
        return Ok(Array1::zeros(factors.rank()));
    }
    if x.len() != dual.dim() {
        return Err(KernelError::DimensionMismatch {
            left: dual.dim(),
            right: x.len(),
        });
    }
    let x = ArrayView1::from(x);
    let kx: Array1<f64> = dual
        .anchors
        .rows()
        .into_iter()
        .map(|a| dual.kernel.eval_unchecked(a, x))
        .collect();
    Ok(dual.anchor_weights(factors, grid).t().dot(&kx))
}

/// `z = lphi ⊙ U^l[t_l, :]` over every mode `l` except `excluded_mode`.
pub fn z_feature(
    lphi_vec: ArrayView1<'_, f64>,
    factors: &CpFactors,
    grid: &TaskGrid,
    task: usize,
    excluded_mode: usize,
) -> Result<Array1<f64>, KernelError> {
    grid.check_mode(excluded_mode)?;
    grid.check_task(task)?;
    if lphi_vec.len() != factors.rank() {
        return Err(KernelError::DimensionMismatch {
            left: factors.rank(),
            right: lphi_vec.len(),
        });
    }
    let mut z = lphi_vec.to_owned();
    factors.hadamard_rows_into(task, grid, Some(excluded_mode), z.as_slice_mut().unwrap());
    Ok(z)
}
