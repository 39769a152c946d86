//! k-fold cross-validation over `(C, R, gamma)` grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{train_independent, train_pooled};
use crate::data::{DataError, MultiTaskDataset, TaskFolds};
use crate::kernels::KernelSpec;
use crate::metrics::{evaluate, MetricsError, Report};
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CvError {
    #[error("the hyperparameter grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("cell {cell} fold {fold}: {source}")]
    Train {
        cell: usize,
        fold: usize,
        #[source]
        source: TrainError,
    },
    #[error("cell {cell} fold {fold}: {source}")]
    Score {
        cell: usize,
        fold: usize,
        #[source]
        source: MetricsError,
    },
}

/// Candidate values; `gamma` is only used with an rbf base kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub c: Vec<f64>,
    pub rank: Vec<usize>,
    pub gamma: Vec<f64>,
}

fn powers_of_two(from: i32, to: i32) -> Vec<f64> {
    (from..=to).step_by(2).map(|e| 2f64.powi(e)).collect()
}

impl Default for CvGrid {
    /// `C ∈ {2^-5, 2^-3, ..., 2^15}`, `R ∈ {1, ..., 5}`,
    /// `gamma ∈ {2^-15, 2^-13, ..., 2^3}`.
    fn default() -> Self {
        CvGrid {
            c: powers_of_two(-5, 15),
            rank: (1..=5).collect(),
            gamma: powers_of_two(-15, 3),
        }
    }
}

impl CvGrid {
    /// A grid holding only the values of `cfg`.
    pub fn single(cfg: &TrainConfig) -> Self {
        CvGrid {
            c: vec![cfg.c],
            rank: vec![cfg.rank],
            gamma: match cfg.kernel {
                KernelSpec::Rbf { gamma } => vec![gamma],
                KernelSpec::Linear => Vec::new(),
            },
        }
    }

    /// Every combination, applied on top of `base`.
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let kernels: Vec<KernelSpec> = match base.kernel {
            KernelSpec::Linear => vec![KernelSpec::Linear],
            KernelSpec::Rbf { .. } => self.gamma.iter().map(|&gamma| KernelSpec::Rbf { gamma }).collect(),
        };
        let mut out = Vec::new();
        for &rank in &self.rank {
            for &c in &self.c {
                for &kernel in &kernels {
                    out.push(TrainConfig {
                        c,
                        rank,
                        kernel,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

/// What is being tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvModel {
    Tensorized,
    Independent,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub config: TrainConfig,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// `rmse` (lower is better) or `accuracy` (higher is better).
    pub metric: String,
    pub k: usize,
    pub cells: Vec<CvCell>,
    pub best_index: usize,
}

impl CvReport {
    pub fn best(&self) -> &TrainConfig {
        &self.cells[self.best_index].config
    }

    /// One row per cell: `c,rank,gamma,mean,fold0,...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("c,rank,gamma,mean");
        for f in 0..self.k {
            s.push_str(&format!(",fold{f}"));
        }
        s.push('\n');
        for cell in &self.cells {
            let gamma = match cell.config.kernel {
                KernelSpec::Rbf { gamma } => gamma.to_string(),
                KernelSpec::Linear => String::new(),
            };
            s.push_str(&format!("{},{},{gamma},{}", cell.config.c, cell.config.rank, cell.mean));
            for v in &cell.fold_scores {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn fold_score(
    model: CvModel,
    train_set: &MultiTaskDataset,
    valid: &MultiTaskDataset,
    cfg: &TrainConfig,
    cell: usize,
    fold: usize,
) -> Result<f64, CvError> {
    let train_err = |source| CvError::Train { cell, fold, source };
    let predicted = match model {
        CvModel::Tensorized => train(train_set, cfg)
            .and_then(|o| o.model.predict_dataset(valid))
            .map_err(train_err)?,
        CvModel::Independent | CvModel::Pooled => {
            let fitted = if model == CvModel::Independent {
                train_independent(train_set, cfg)
            } else {
                train_pooled(train_set, cfg)
            };
            fitted.and_then(|(m, _)| m.predict_dataset(valid)).map_err(train_err)?
        }
    };
    let truth: Vec<Vec<f64>> = valid.tasks().iter().map(|b| b.labels.clone()).collect();
    let classification = cfg.variant.is_classification();
    // Correlation may be undefined on a small fold; only RMSE is needed here.
    let score = if classification {
        match evaluate(&truth, &predicted, true) {
            Ok(r) => match r.pooled {
                Report::Classification(c) => c.accuracy,
                Report::Regression(_) => unreachable!(),
            },
            Err(source) => return Err(CvError::Score { cell, fold, source }),
        }
    } else {
        let y: Vec<f64> = truth.concat();
        let p: Vec<f64> = predicted.concat();
        crate::metrics::rmse(&y, &p).map_err(|source| CvError::Score { cell, fold, source })?
    };
    Ok(score)
}

/// Scores every cell of `grid` (applied on top of `base`) by `k`-fold
/// cross-validation with folds stratified by task. The best cell has the
/// lowest mean RMSE or highest mean accuracy; ties go to the smaller rank,
/// then the smaller C.
pub fn kfold_cv(
    data: &MultiTaskDataset,
    grid: &CvGrid,
    base: &TrainConfig,
    model: CvModel,
    k: usize,
    seed: u64,
) -> Result<CvReport, CvError> {
    let cells = grid.cells(base);
    if cells.is_empty() {
        return Err(CvError::EmptyGrid);
    }
    let folds = TaskFolds::new(data, k, seed)?;
    let splits = (0..k)
        .map(|f| {
            let (tr, va) = folds.split(f);
            Ok((data.select(&tr)?, data.select(&va)?))
        })
        .collect::<Result<Vec<_>, DataError>>()?;

    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..k).map(move |f| (c, f))).collect();
    let scores = jobs
        .par_iter()
        .map(|&(c, f)| fold_score(model, &splits[f].0, &splits[f].1, &cells[c], c, f))
        .collect::<Result<Vec<f64>, CvError>>()?;

    let cells: Vec<CvCell> = cells
        .into_iter()
        .enumerate()
        .map(|(c, config)| {
            let fold_scores = scores[c * k..(c + 1) * k].to_vec();
            let mean = fold_scores.iter().sum::<f64>() / k as f64;
            CvCell {
                config,
                fold_scores,
                mean,
            }
        })
        .collect();

    let classification = base.variant.is_classification();
    let better = |a: &CvCell, b: &CvCell| {
        let (sa, sb) = if classification { (-a.mean, -b.mean) } else { (a.mean, b.mean) };
        sa.total_cmp(&sb)
            .then(a.config.rank.cmp(&b.config.rank))
            .then(a.config.c.total_cmp(&b.config.c))
            .is_lt()
    };
    let mut best_index = 0;
    for i in 1..cells.len() {
        if better(&cells[i], &cells[best_index]) {
            best_index = i;
        }
    }
    Ok(CvReport {
        metric: if classification { "accuracy" } else { "rmse" }.to_string(),
        k,
        cells,
        best_index,
    })
}
