//! Control models: one model per task (no sharing) and a single model over
//! all pooled samples (full sharing). Both reuse the tensorized trainer on
//! the one-task grid with a rank-1 factor frozen at 1, which is exactly a
//! standard SVM or LSSVM.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp::{CpFactors, TaskGrid};
use crate::data::MultiTaskDataset;
use crate::train::{train_from, Timing, TrainConfig, TrainError, TrainedModel, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Independent,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub variant: Variant,
    pub grid: TaskGrid,
    /// One model per task (independent) or a single model (pooled), each on
    /// the grid `[1]`.
    pub models: Vec<TrainedModel>,
}

/// The config a single standard model is trained with.
pub fn single_task_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        rank: 1,
        update_factors: false,
        max_outer_iters: 0,
        restarts: 1,
        ..cfg.clone()
    }
}

fn fit_single(data: &MultiTaskDataset, cfg: &TrainConfig) -> Result<(TrainedModel, Timing), TrainError> {
    let ones = CpFactors::ones(data.grid(), 1)?;
    let out = train_from(data, &single_task_config(cfg), ones)?;
    Ok((out.model, out.timing))
}

/// Trains one standard model per task, in parallel.
pub fn train_independent(data: &MultiTaskDataset, cfg: &TrainConfig) -> Result<(BaselineModel, Timing), TrainError> {
    data.require_nonempty_tasks()?;
    let fitted = (0..data.num_tasks())
        .into_par_iter()
        .map(|t| fit_single(&data.single_task(t)?, cfg))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut timing = Timing::default();
    let mut models = Vec::with_capacity(fitted.len());
    for (m, t) in fitted {
        timing.add(&t);
        models.push(m);
    }
    Ok((
        BaselineModel {
            kind: BaselineKind::Independent,
            variant: cfg.variant,
            grid: data.grid().clone(),
            models,
        },
        timing,
    ))
}

/// Trains a single standard model on all samples; the task id is ignored.
pub fn train_pooled(data: &MultiTaskDataset, cfg: &TrainConfig) -> Result<(BaselineModel, Timing), TrainError> {
    data.require_nonempty_tasks()?;
    let (model, timing) = fit_single(&data.pooled()?, cfg)?;
    Ok((
        BaselineModel {
            kind: BaselineKind::Pooled,
            variant: cfg.variant,
            grid: data.grid().clone(),
            models: vec![model],
        },
        timing,
    ))
}

impl BaselineModel {
    fn model_for(&self, task: usize) -> Result<&TrainedModel, TrainError> {
        self.grid.check_task(task)?;
        Ok(match self.kind {
            BaselineKind::Independent => &self.models[task],
            BaselineKind::Pooled => &self.models[0],
        })
    }

    pub fn decision_value(&self, x: &[f64], task: usize) -> Result<f64, TrainError> {
        self.model_for(task)?.decision_value(x, 0)
    }

    pub fn predict(&self, x: &[f64], task: usize) -> Result<f64, TrainError> {
        self.model_for(task)?.predict(x, 0)
    }

    pub fn predict_many(&self, x: ArrayView2<'_, f64>, tasks: &[usize]) -> Result<Vec<f64>, TrainError> {
        if x.nrows() != tasks.len() {
            return Err(TrainError::Config(format!("{} rows but {} task ids", x.nrows(), tasks.len())));
        }
        match self.kind {
            BaselineKind::Pooled => {
                for &t in tasks {
                    self.grid.check_task(t)?;
                }
                self.models[0].predict_many(x, &vec![0; tasks.len()])
            }
            BaselineKind::Independent => {
                let mut out = vec![0.0; tasks.len()];
                for t in 0..self.grid.total() {
                    let rows: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i] == t).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let sub = x.select(ndarray::Axis(0), &rows);
                    let pred = self.models[t].predict_many(sub.view(), &vec![0; rows.len()])?;
                    for (i, p) in rows.into_iter().zip(pred) {
                        out[i] = p;
                    }
                }
                for &t in tasks {
                    self.grid.check_task(t)?;
                }
                Ok(out)
            }
        }
    }

    pub fn predict_dataset(&self, data: &MultiTaskDataset) -> Result<Vec<Vec<f64>>, TrainError> {
        let st = data.stacked();
        let flat = self.predict_many(st.features.view(), &st.sample_tasks)?;
        Ok(st.offsets.windows(2).map(|w| flat[w[0]..w[1]].to_vec()).collect())
    }
}
