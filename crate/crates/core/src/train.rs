//! Alternating training of the tensorized SVM and LSSVM variants.
//!
//! Each outer iteration solves the `L`-subproblem over every training
//! sample and then sweeps the factor rows, mode by mode and slice by slice.
//! The loop always finishes with an `L`-subproblem, so the stored duals,
//! biases and factors belong together.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cp::{CpFactors, DualSharedFactor, IndexError, TaskGrid};
use crate::data::{DataError, MultiTaskDataset, ProblemKind, Stacked};
use crate::kernels::{weighted_gram_with, GramCache, KernelError, KernelSpec};
use crate::linsolve::{assemble_l_system, assemble_u_system, solve_saddle, LinsolveError, PdSolver};
use crate::qp::{
    merge_split, project_warm_start, solve_qp, svr_split, LambdaProblem, QMatrix, QpError, QpOptions, QpProblem,
};

/// Stopping threshold used when early stopping is switched on.
pub const EARLY_STOP_THRESHOLD: f64 = 1e-1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "tsvc")]
    Svc,
    #[serde(rename = "tsvr")]
    Svr,
    #[serde(rename = "tlssvc")]
    Lssvc,
    #[serde(rename = "tlssvr")]
    Lssvr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Svc, Variant::Svr, Variant::Lssvc, Variant::Lssvr];

    pub fn kind(self) -> ProblemKind {
        match self {
            Variant::Svc | Variant::Lssvc => ProblemKind::Classification,
            Variant::Svr | Variant::Lssvr => ProblemKind::Regression,
        }
    }

    pub fn is_classification(self) -> bool {
        self.kind() == ProblemKind::Classification
    }

    pub fn is_least_squares(self) -> bool {
        matches!(self, Variant::Lssvc | Variant::Lssvr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Svc => "tsvc",
            Variant::Svr => "tsvr",
            Variant::Lssvc => "tlssvc",
            Variant::Lssvr => "tlssvr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?} (expected tsvc, tsvr, tlssvc or tlssvr)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub c: f64,
    pub rank: usize,
    pub kernel: KernelSpec,
    /// Tube half-width of the ε-insensitive loss (SVR only).
    pub epsilon: f64,
    pub stop_threshold: f64,
    /// Replaces `stop_threshold` with [`EARLY_STOP_THRESHOLD`].
    pub early_stop: bool,
    pub max_outer_iters: usize,
    pub seed: u64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    pub solver: PdSolver,
    /// When false the factors stay at their initial values and only the
    /// shared factor is fitted.
    pub update_factors: bool,
    /// Random starts tried by [`train`]; the fit with the lowest final
    /// objective is kept. Start 0 uses `seed` itself.
    pub restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Lssvr,
            c: 1.0,
            rank: 3,
            kernel: KernelSpec::Linear,
            epsilon: 0.1,
            stop_threshold: 1e-3,
            early_stop: false,
            max_outer_iters: 50,
            seed: 0,
            qp_tol: 1e-3,
            qp_max_iter: 10_000_000,
            solver: PdSolver::Cholesky,
            update_factors: true,
            restarts: 3,
        }
    }
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        TrainConfig {
            variant,
            ..Default::default()
        }
    }

    pub fn threshold(&self) -> f64 {
        if self.early_stop {
            EARLY_STOP_THRESHOLD
        } else {
            self.stop_threshold
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad(format!("C must be positive and finite, got {}", self.c));
        }
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return bad(format!("stop_threshold must lie in (0, 1), got {}", self.stop_threshold));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        if !(self.qp_tol > 0.0) || self.qp_max_iter == 0 {
            return bad("qp_tol and qp_max_iter must be positive".into());
        }
        self.kernel.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SharedFactor,
    FactorRow { mode: usize, slice: usize },
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::SharedFactor => f.write_str("shared-factor subproblem"),
            Phase::FactorRow { mode, slice } => write!(f, "factor-row subproblem (mode {mode}, slice {slice})"),
        }
    }
}

#[derive(Debug, Error, Clone)]
pub enum SolverFailure {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Linsolve(#[from] LinsolveError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("variant {variant} needs {expected:?} data, got {got:?}")]
    KindMismatch {
        variant: Variant,
        expected: ProblemKind,
        got: ProblemKind,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{phase} failed after {} outer iterations: {source}", trace.iterations.len())]
    Subproblem {
        phase: Phase,
        source: SolverFailure,
        trace: Box<ConvergenceTrace>,
    },
    #[error("feature dimension {got} does not match the model's {expected}")]
    Dimension { expected: usize, got: usize },
}

/// One outer iteration: a factor sweep and the `L`-solve that preceded it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub relative_error: f64,
    pub seconds: f64,
    pub l_residual: f64,
    pub u_residual: f64,
    pub l_objective: f64,
    pub u_objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub iterations: Vec<IterationRecord>,
    pub final_l_residual: f64,
    pub converged: bool,
}

impl ConvergenceTrace {
    pub fn relative_errors(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.relative_error).collect()
    }
}

/// Wall-clock breakdown of one training run, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Kernel cache plus every task-weighted Gram.
    pub gram: f64,
    pub l_solve: f64,
    pub u_solve: f64,
    pub total: f64,
}

impl Timing {
    pub fn add(&mut self, other: &Timing) {
        self.gram += other.gram;
        self.l_solve += other.l_solve;
        self.u_solve += other.u_solve;
        self.total += other.total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub outer_iterations: usize,
    pub final_relative_error: Option<f64>,
    pub converged: bool,
    /// Dual objective of every subproblem solve, in order.
    pub objective_trace: Vec<f64>,
    /// Tasks whose last bias came from the bound-interval fallback.
    pub fallback_bias_tasks: Vec<usize>,
    /// Final value of the regularized training objective.
    #[serde(default)]
    pub objective: f64,
    /// Which random start produced the model.
    #[serde(default)]
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub variant: Variant,
    pub grid: TaskGrid,
    pub kernel: KernelSpec,
    pub factors: CpFactors,
    pub dual_l: DualSharedFactor,
    pub biases: Vec<f64>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub trace: ConvergenceTrace,
    pub timing: Timing,
}

/// Starting point for an SVM subproblem: zero on the first visit, otherwise
/// the previous duals clipped into the current box.
pub fn warm_start_carry<M: QMatrix>(previous: Option<&[f64]>, problem: &QpProblem<M>) -> Vec<f64> {
    previous
        .and_then(|p| project_warm_start(p, problem))
        .unwrap_or_else(|| vec![0.0; problem.dim()])
}

/// Result of the shared-factor subproblem.
#[derive(Debug, Clone)]
pub struct LSolution {
    /// Per-sample coefficient of `L`: `α y` (classification) or `λ`.
    pub coeffs: Vec<f64>,
    pub biases: Vec<f64>,
    pub residual: f64,
    pub objective: f64,
    pub fallback_tasks: Vec<usize>,
    /// Raw solver iterate, reused as the next warm start.
    pub warm: Vec<f64>,
    pub gram_seconds: f64,
    pub solve_seconds: f64,
}

/// Result of one factor-row subproblem.
#[derive(Debug, Clone)]
pub struct SliceSolution {
    pub tasks: Vec<usize>,
    /// z-features of the involved samples, one row each.
    pub z: Array2<f64>,
    /// Per-sample coefficient: `β y` (classification) or `λ`.
    pub coeffs: Vec<f64>,
    /// New factor row, `sum_i coeff_i z_i`.
    pub row: Array1<f64>,
    /// Bias of each task in `tasks`.
    pub biases: Vec<f64>,
    pub residual: f64,
    pub objective: f64,
    pub fallback_tasks: Vec<usize>,
    pub warm: Vec<f64>,
}

struct SvmSolve {
    x: Vec<f64>,
    coeffs: Vec<f64>,
    biases: Vec<f64>,
    residual: f64,
    objective: f64,
    fallback: Vec<usize>,
}

/// Holds everything that stays fixed during one training run: the stacked
/// samples and the kernel cache.
pub struct Trainer<'a> {
    data: &'a MultiTaskDataset,
    cfg: TrainConfig,
    stacked: Stacked,
    gram: GramCache,
    gram_seconds: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a MultiTaskDataset, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.kind() != cfg.variant.kind() {
            return Err(TrainError::KindMismatch {
                variant: cfg.variant,
                expected: cfg.variant.kind(),
                got: data.kind(),
            });
        }
        data.require_nonempty_tasks()?;
        let start = Instant::now();
        let stacked = data.stacked();
        let gram = GramCache::build(cfg.kernel, stacked.features.view(), stacked.offsets.clone())?;
        Ok(Trainer {
            data,
            cfg,
            stacked,
            gram,
            gram_seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &TaskGrid {
        self.data.grid()
    }

    pub fn gram(&self) -> &GramCache {
        &self.gram
    }

    pub fn stacked(&self) -> &Stacked {
        &self.stacked
    }

    fn qp_options(&self, initial: Vec<f64>) -> QpOptions {
        QpOptions {
            tol: self.cfg.qp_tol,
            max_iter: self.cfg.qp_max_iter,
            initial: Some(initial),
            ..Default::default()
        }
    }

    fn solve_svm<M: QMatrix>(
        &self,
        q: M,
        labels: &[f64],
        groups: Vec<usize>,
        n_groups: usize,
        warm: Option<&[f64]>,
    ) -> Result<SvmSolve, QpError> {
        let m = labels.len();
        let c = self.cfg.c;
        if self.cfg.variant.is_classification() {
            let p = QpProblem::new(q, vec![1.0; m], labels.to_vec(), groups, n_groups, vec![0.0; m], vec![c; m])?;
            let init = warm_start_carry(warm, &p);
            let sol = solve_qp(&p, &self.qp_options(init))?;
            let coeffs = sol.x.iter().zip(labels).map(|(a, y)| a * y).collect();
            Ok(SvmSolve {
                coeffs,
                x: sol.x,
                biases: sol.group_multipliers,
                residual: sol.kkt_residual,
                objective: sol.objective,
                fallback: sol.fallback_groups,
            })
        } else {
            let p = svr_split(LambdaProblem {
                q,
                y: labels.to_vec(),
                epsilon: self.cfg.epsilon,
                c,
                groups,
                n_groups,
            })?;
            let init = warm_start_carry(warm, &p);
            let sol = solve_qp(&p, &self.qp_options(init))?;
            Ok(SvmSolve {
                coeffs: merge_split(&sol.x),
                x: sol.x,
                biases: sol.group_multipliers,
                residual: sol.kkt_residual,
                objective: sol.objective,
                fallback: sol.fallback_groups,
            })
        }
    }

    /// The shared-factor subproblem over all samples with the factors fixed.
    pub fn solve_l(&self, factors: &CpFactors, warm: Option<&[f64]>) -> Result<LSolution, SolverFailure> {
        let grid = self.grid();
        let classification = self.cfg.variant.is_classification();
        let labels = &self.stacked.labels;
        let start = Instant::now();
        let related = factors.relatedness_gram(grid);
        let q = weighted_gram_with(&self.gram, &related, classification.then_some(labels.as_slice()));
        let gram_seconds = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let tasks = &self.stacked.sample_tasks;
        let mut out = if self.cfg.variant.is_least_squares() {
            let sys = assemble_l_system(q, tasks, labels, classification, self.cfg.c, grid.total())?;
            let sol = solve_saddle(&sys, self.cfg.solver)?;
            let objective = 0.5 * sol.x2.iter().zip(&sys.d2).map(|(a, d)| a * d).sum::<f64>();
            let coeffs = if classification {
                sol.x2.iter().zip(labels).map(|(a, y)| a * y).collect()
            } else {
                sol.x2.clone()
            };
            LSolution {
                coeffs,
                biases: sol.x1,
                residual: sol.residual,
                objective,
                fallback_tasks: Vec::new(),
                warm: Vec::new(),
                gram_seconds,
                solve_seconds: 0.0,
            }
        } else {
            let s = self.solve_svm(&q, labels, tasks.clone(), grid.total(), warm)?;
            LSolution {
                coeffs: s.coeffs,
                biases: s.biases,
                residual: s.residual,
                objective: s.objective,
                fallback_tasks: s.fallback,
                warm: s.x,
                gram_seconds,
                solve_seconds: 0.0,
            }
        };
        out.solve_seconds = start.elapsed().as_secs_f64();
        Ok(out)
    }

    /// `L^T phi(x_i)` for every training sample, as an `m x R` matrix,
    /// using the factors the shared factor was solved with.
    pub fn lphi_train(&self, factors: &CpFactors, l: &LSolution) -> Array2<f64> {
        let mixing = factors.mixing_matrix(self.grid());
        let mut a = Array2::zeros((l.coeffs.len(), factors.rank()));
        for (p, mut row) in a.axis_iter_mut(Axis(0)).enumerate() {
            let c = l.coeffs[p];
            if c != 0.0 {
                row.assign(&mixing.row(self.stacked.sample_tasks[p]));
                row *= c;
            }
        }
        self.gram.matrix().dot(&a)
    }

    /// Squared column norms of the shared factor `L` from the dual form of
    /// `l`, given `lphi = L^T phi(x)` on the training samples.
    fn shared_column_norms(&self, factors: &CpFactors, l: &LSolution, lphi: ArrayView2<'_, f64>) -> Vec<f64> {
        let mixing = factors.mixing_matrix(self.grid());
        let mut norms = vec![0.0; factors.rank()];
        for (p, row) in lphi.axis_iter(Axis(0)).enumerate() {
            let c = l.coeffs[p];
            if c != 0.0 {
                let u = mixing.row(self.stacked.sample_tasks[p]);
                for (r, n) in norms.iter_mut().enumerate() {
                    *n += c * u[r] * row[r];
                }
            }
        }
        norms
    }

    /// Solves the subproblem for row `slice` of factor `mode`.
    pub fn solve_slice(
        &self,
        factors: &CpFactors,
        lphi: ArrayView2<'_, f64>,
        mode: usize,
        slice: usize,
        warm: Option<&[f64]>,
    ) -> Result<SliceSolution, SolverFailure> {
        let grid = self.grid();
        let tasks = grid
            .slice_tasks(mode, slice)
            .map_err(|e| LinsolveError::Shape(e.to_string()))?;
        let offsets = &self.stacked.offsets;
        let size: usize = tasks.iter().map(|&t| offsets[t + 1] - offsets[t]).sum();
        let rank = factors.rank();
        let mut z = Array2::zeros((size, rank));
        let mut labels = Vec::with_capacity(size);
        let mut groups = Vec::with_capacity(size);
        let mut row = 0;
        for (g, &t) in tasks.iter().enumerate() {
            for i in offsets[t]..offsets[t + 1] {
                let mut zr = z.row_mut(row);
                zr.assign(&lphi.row(i));
                factors.hadamard_rows_into(t, grid, Some(mode), zr.as_slice_mut().unwrap());
                labels.push(self.stacked.labels[i]);
                groups.push(g);
                row += 1;
            }
        }
        let classification = self.cfg.variant.is_classification();
        let n_groups = tasks.len();
        let (coeffs, biases, residual, objective, fallback, warm_out) = if self.cfg.variant.is_least_squares() {
            let sys = assemble_u_system(z.view(), &groups, &labels, classification, self.cfg.c, n_groups)?;
            let sol = solve_saddle(&sys, self.cfg.solver)?;
            let objective = 0.5 * sol.x2.iter().zip(&sys.d2).map(|(a, d)| a * d).sum::<f64>();
            let coeffs: Vec<f64> = if classification {
                sol.x2.iter().zip(&labels).map(|(a, y)| a * y).collect()
            } else {
                sol.x2
            };
            (coeffs, sol.x1, sol.residual, objective, Vec::new(), Vec::new())
        } else {
            let mut q = z.dot(&z.t());
            if classification {
                for ((i, j), v) in q.indexed_iter_mut() {
                    *v *= labels[i] * labels[j];
                }
            }
            crate::cp::symmetrize(&mut q);
            let s = self.solve_svm(q, &labels, groups, n_groups, warm)?;
            (s.coeffs, s.biases, s.residual, s.objective, s.fallback, s.x)
        };
        let new_row = z.t().dot(&Array1::from(coeffs.clone()));
        Ok(SliceSolution {
            fallback_tasks: fallback.iter().map(|&g| tasks[g]).collect(),
            tasks,
            z,
            coeffs,
            row: new_row,
            biases,
            residual,
            objective,
            warm: warm_out,
        })
    }

    /// Runs the alternating loop from `initial` (or seeded random factors).
    pub fn run(&self, initial: Option<CpFactors>) -> Result<TrainOutput, TrainError> {
        let total_start = Instant::now();
        let grid = self.grid().clone();
        let cfg = &self.cfg;
        let mut factors = match initial {
            Some(f) => {
                f.validate(&grid)?;
                if f.rank() != cfg.rank {
                    return Err(TrainError::Config(format!(
                        "initial factors have rank {} but the config asks for {}",
                        f.rank(),
                        cfg.rank
                    )));
                }
                f
            }
            None => CpFactors::init(&grid, cfg.rank, cfg.seed)?,
        };
        let threshold = cfg.threshold();
        let mut timing = Timing {
            gram: self.gram_seconds,
            ..Default::default()
        };
        let mut trace = ConvergenceTrace::default();
        let mut objective_trace = Vec::new();
        let mut l_warm: Option<Vec<f64>> = None;
        let mut u_warm: Vec<Vec<Option<Vec<f64>>>> = grid.shape().iter().map(|&s| vec![None; s]).collect();
        let mut biases = vec![0.0; grid.total()];
        let mut fallback = vec![false; grid.total()];
        let fail = |phase: Phase, source: SolverFailure, trace: &ConvergenceTrace| TrainError::Subproblem {
            phase,
            source,
            trace: Box::new(trace.clone()),
        };

        let l = loop {
            let iter_start = Instant::now();
            let l = self
                .solve_l(&factors, l_warm.as_deref())
                .map_err(|e| fail(Phase::SharedFactor, e, &trace))?;
            timing.gram += l.gram_seconds;
            timing.l_solve += l.solve_seconds;
            objective_trace.push(l.objective);
            log::debug!(
                "shared-factor solve: residual {:.3e}, objective {:.6e}",
                l.residual,
                l.objective
            );
            if !cfg.variant.is_least_squares() {
                l_warm = Some(l.warm.clone());
            }
            if trace.converged || !cfg.update_factors || trace.iterations.len() >= cfg.max_outer_iters {
                break l;
            }

            let sweep_start = Instant::now();
            let previous = factors.clone();
            let lphi = self.lphi_train(&factors, &l);
            let shared_norms = self.shared_column_norms(&factors, &l, lphi.view());
            biases.copy_from_slice(&l.biases);
            fallback.iter_mut().for_each(|f| *f = false);
            for &t in &l.fallback_tasks {
                fallback[t] = true;
            }
            let mut u_residual = 0.0f64;
            let mut u_objective = 0.0;
            for mode in 0..grid.modes() {
                let warm = &u_warm[mode];
                let solved: Vec<Result<SliceSolution, SolverFailure>> = (0..grid.shape()[mode])
                    .into_par_iter()
                    .map(|slice| self.solve_slice(&factors, lphi.view(), mode, slice, warm[slice].as_deref()))
                    .collect();
                for (slice, res) in solved.into_iter().enumerate() {
                    let s = res.map_err(|e| fail(Phase::FactorRow { mode, slice }, e, &trace))?;
                    factors.factor_mut(mode).row_mut(slice).assign(&s.row);
                    for (&t, &b) in s.tasks.iter().zip(&s.biases) {
                        biases[t] = b;
                        fallback[t] = false;
                    }
                    for &t in &s.fallback_tasks {
                        fallback[t] = true;
                    }
                    u_residual = u_residual.max(s.residual);
                    u_objective += s.objective;
                    objective_trace.push(s.objective);
                    if !cfg.variant.is_least_squares() {
                        u_warm[mode][slice] = Some(s.warm);
                    }
                }
            }
            // Alternating updates drift slowly along the rescaling directions
            // that leave every w_t unchanged; jump straight to the balanced
            // point, which lowers the regularizer and fixes the scale of u_t.
            factors.balance_columns(&shared_norms);
            timing.u_solve += sweep_start.elapsed().as_secs_f64();
            let re = factors.relative_change(&previous);
            log::info!("outer iteration {}: relative error {re:.3e}", trace.iterations.len() + 1);
            trace.iterations.push(IterationRecord {
                relative_error: re,
                seconds: iter_start.elapsed().as_secs_f64(),
                l_residual: l.residual,
                u_residual,
                l_objective: l.objective,
                u_objective,
            });
            if re < threshold {
                trace.converged = true;
            }
        };

        trace.final_l_residual = l.residual;
        let fallback_bias_tasks = l.fallback_tasks.clone();
        let keep: Vec<usize> = if cfg.variant.is_least_squares() {
            (0..l.coeffs.len()).collect()
        } else {
            (0..l.coeffs.len()).filter(|&i| l.coeffs[i] != 0.0).collect()
        };
        let dual_l = DualSharedFactor::new(
            self.stacked.features.select(Axis(0), &keep),
            keep.iter().map(|&i| self.stacked.sample_tasks[i]).collect(),
            keep.iter().map(|&i| l.coeffs[i]).collect(),
            cfg.kernel,
        )?;
        timing.total = total_start.elapsed().as_secs_f64() + self.gram_seconds;
        // the last L-solve is exact, so its optimal value stands in for the
        // loss and ||L||^2 terms
        let objective = l.objective + 0.5 * (0..grid.modes()).map(|n| factors.factor(n).iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
        let model = TrainedModel {
            variant: cfg.variant,
            grid,
            kernel: cfg.kernel,
            factors,
            dual_l,
            biases: l.biases,
            meta: TrainingMeta {
                config: cfg.clone(),
                outer_iterations: trace.iterations.len(),
                final_relative_error: trace.iterations.last().map(|r| r.relative_error),
                converged: trace.converged,
                objective_trace,
                fallback_bias_tasks,
                objective,
                start: 0,
            },
        };
        Ok(TrainOutput { model, trace, timing })
    }
}

/// Trains with seeded random initial factors.
pub fn train(data: &MultiTaskDataset, cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    let trainer = Trainer::new(data, cfg.clone())?;
    let mut best: Option<TrainOutput> = None;
    let mut timing = Timing::default();
    for start in 0..cfg.restarts {
        let init = CpFactors::init(data.grid(), cfg.rank, start_seed(cfg.seed, start))?;
        let mut out = trainer.run(Some(init))?;
        timing.add(&out.timing);
        log::debug!("start {start}: objective {:.6e}", out.model.meta.objective);
        out.model.meta.start = start;
        if best.as_ref().is_none_or(|b| out.model.meta.objective < b.model.meta.objective) {
            best = Some(out);
        }
    }
    let mut best = best.expect("at least one start");
    // the Gram cache is shared, so count it once
    timing.gram -= (cfg.restarts - 1) as f64 * trainer.gram_seconds;
    timing.total -= (cfg.restarts - 1) as f64 * trainer.gram_seconds;
    best.timing = timing;
    Ok(best)
}

/// Seed of the `start`-th random initialization.
pub fn start_seed(seed: u64, start: usize) -> u64 {
    seed.wrapping_add((start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains once from the given initial factors; `cfg.restarts` is ignored.
pub fn train_from(data: &MultiTaskDataset, cfg: &TrainConfig, initial: CpFactors) -> Result<TrainOutput, TrainError> {
    Trainer::new(data, cfg.clone())?.run(Some(initial))
}

impl TrainedModel {
    pub fn num_tasks(&self) -> usize {
        self.grid.total()
    }

    pub fn dim(&self) -> usize {
        self.dual_l.dim()
    }

    pub fn is_classification(&self) -> bool {
        self.variant.is_classification()
    }

    /// `f_t(x) = <u_t, L^T phi(x)> + b_t` for each row of `x` paired with
    /// the task in `tasks`.
    pub fn decision_values(&self, x: ArrayView2<'_, f64>, tasks: &[usize]) -> Result<Vec<f64>, TrainError> {
        if x.nrows() != tasks.len() {
            return Err(TrainError::Config(format!("{} rows but {} task ids", x.nrows(), tasks.len())));
        }
        for &t in tasks {
            self.grid.check_task(t)?;
        }
        let mixing = self.factors.mixing_matrix(&self.grid);
        if self.dual_l.is_empty() {
            return Ok(tasks.iter().map(|&t| self.biases[t]).collect());
        }
        if x.ncols() != self.dim() {
            return Err(TrainError::Dimension {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        let weights = self.dual_l.anchor_weights(&self.factors, &self.grid);
        let lphi = self.kernel.cross(x, self.dual_l.anchors.view())?.dot(&weights);
        Ok(tasks
            .iter()
            .enumerate()
            .map(|(i, &t)| lphi.row(i).dot(&mixing.row(t)) + self.biases[t])
            .collect())
    }

    pub fn decision_value(&self, x: &[f64], task: usize) -> Result<f64, TrainError> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("single row");
        Ok(self.decision_values(x, &[task])?[0])
    }

    /// The decision value for regression, its sign (ties to +1) for
    /// classification.
    pub fn predict(&self, x: &[f64], task: usize) -> Result<f64, TrainError> {
        let f = self.decision_value(x, task)?;
        Ok(self.finish(f))
    }

    pub fn predict_many(&self, x: ArrayView2<'_, f64>, tasks: &[usize]) -> Result<Vec<f64>, TrainError> {
        Ok(self.decision_values(x, tasks)?.into_iter().map(|f| self.finish(f)).collect())
    }

    fn finish(&self, f: f64) -> f64 {
        if self.is_classification() {
            if f >= 0.0 {
                1.0
            } else {
                -1.0
            }
        } else {
            f
        }
    }

    /// Predictions for every sample of a dataset, grouped by task.
    pub fn predict_dataset(&self, data: &MultiTaskDataset) -> Result<Vec<Vec<f64>>, TrainError> {
        if data.grid() != &self.grid {
            return Err(TrainError::Config(format!(
                "dataset grid {:?} differs from the model grid {:?}",
                data.grid().shape(),
                self.grid.shape()
            )));
        }
        let st = data.stacked();
        let flat = self.predict_many(st.features.view(), &st.sample_tasks)?;
        Ok(st.offsets.windows(2).map(|w| flat[w[0]..w[1]].to_vec()).collect())
    }

    /// `w_t = L u_t` as rows of a `T x d` matrix (linear kernel only).
    pub fn explicit_weights(&self) -> Result<Array2<f64>, TrainError> {
        Ok(self.dual_l.explicit_weights(&self.factors, &self.grid)?)
    }

    /// `<w_t, x> + b_t` through explicit weights (linear kernel only).
    pub fn decision_value_primal(&self, weights: &Array2<f64>, x: &[f64], task: usize) -> Result<f64, TrainError> {
        self.grid.check_task(task)?;
        if x.len() != weights.ncols() {
            return Err(TrainError::Dimension {
                expected: weights.ncols(),
                got: x.len(),
            });
        }
        Ok(weights.row(task).iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.biases[task])
    }

    /// `<u_t, u_q>` for all task pairs.
    pub fn relatedness(&self) -> Array2<f64> {
        self.factors.relatedness_gram(&self.grid)
    }
}
