//! Multitask datasets: the in-memory layout, synthetic CP-structured data,
//! CSV files, and task-stratified folds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cp::{CpFactors, IndexError, TaskGrid};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("task {0} has no samples")]
    EmptyTask(usize),
    #[error("expected {expected} task blocks for the grid, got {got}")]
    TaskCount { expected: usize, got: usize },
    #[error("task {task}: {rows} feature rows but {labels} labels")]
    BlockShape { task: usize, rows: usize, labels: usize },
    #[error("task {task} has feature dimension {got}, expected {expected}")]
    Dimension { task: usize, expected: usize, got: usize },
    #[error("task {task}: classification label {value} is not -1 or +1")]
    NonBinaryLabel { task: usize, value: f64 },
    #[error("task {task}: non-finite value in {what}")]
    NonFinite { task: usize, what: &'static str },
    #[error("line {line}: bad header: {message}")]
    Header { line: usize, message: String },
    #[error("line {line}: expected {expected} fields, found {got}")]
    Ragged { line: usize, expected: usize, got: usize },
    #[error("line {line}, column {column}: cannot parse {value:?} as a number")]
    NonNumeric { line: usize, column: usize, value: String },
    #[error("line {line}: task index {value:?} invalid for mode {mode} of size {size}")]
    TaskIndex { line: usize, mode: usize, value: String, size: usize },
    #[error("line {line}: classification label {value} is not -1 or +1")]
    Label { line: usize, value: f64 },
    #[error("invalid synthetic config: {field}: {message}")]
    Config { field: &'static str, message: String },
    #[error("invalid fold setup: {0}")]
    Folds(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Classification,
    Regression,
}

/// One task's samples: an `m_t x d` feature block and its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBlock {
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
}

impl TaskBlock {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Samples grouped by flat task id. Every task of the grid has a block;
/// blocks may differ in size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskDataset {
    grid: TaskGrid,
    dim: usize,
    kind: ProblemKind,
    tasks: Vec<TaskBlock>,
}

/// All samples concatenated in task order.
#[derive(Debug, Clone)]
pub struct Stacked {
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
    /// `offsets[t]..offsets[t + 1]` are the rows of task `t`.
    pub offsets: Vec<usize>,
    pub sample_tasks: Vec<usize>,
}

impl MultiTaskDataset {
    /// Builds a dataset; empty task blocks are allowed here and rejected by
    /// the trainers.
    pub fn new(grid: TaskGrid, kind: ProblemKind, tasks: Vec<TaskBlock>) -> Result<Self, DataError> {
        if tasks.len() != grid.total() {
            return Err(DataError::TaskCount {
                expected: grid.total(),
                got: tasks.len(),
            });
        }
        let dim = tasks
            .iter()
            .find(|b| !b.is_empty())
            .map(|b| b.features.ncols())
            .ok_or(DataError::Empty)?;
        for (t, b) in tasks.iter().enumerate() {
            if b.features.nrows() != b.labels.len() {
                return Err(DataError::BlockShape {
                    task: t,
                    rows: b.features.nrows(),
                    labels: b.labels.len(),
                });
            }
            if !b.is_empty() && b.features.ncols() != dim {
                return Err(DataError::Dimension {
                    task: t,
                    expected: dim,
                    got: b.features.ncols(),
                });
            }
            if b.features.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { task: t, what: "features" });
            }
            if b.labels.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { task: t, what: "labels" });
            }
            if kind == ProblemKind::Classification {
                if let Some(&value) = b.labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
                    return Err(DataError::NonBinaryLabel { task: t, value });
                }
            }
        }
        Ok(MultiTaskDataset { grid, dim, kind, tasks })
    }

    pub fn grid(&self) -> &TaskGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn tasks(&self) -> &[TaskBlock] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> &TaskBlock {
        &self.tasks[t]
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_samples(&self) -> usize {
        self.tasks.iter().map(TaskBlock::len).sum()
    }

    pub fn require_nonempty_tasks(&self) -> Result<(), DataError> {
        match self.tasks.iter().position(TaskBlock::is_empty) {
            Some(t) => Err(DataError::EmptyTask(t)),
            None => Ok(()),
        }
    }

    pub fn stacked(&self) -> Stacked {
        let m = self.num_samples();
        let mut features = Array2::zeros((m, self.dim));
        let mut labels = Vec::with_capacity(m);
        let mut offsets = Vec::with_capacity(self.tasks.len() + 1);
        let mut sample_tasks = Vec::with_capacity(m);
        offsets.push(0);
        let mut row = 0;
        for (t, b) in self.tasks.iter().enumerate() {
            if !b.is_empty() {
                features.slice_mut(s![row..row + b.len(), ..]).assign(&b.features);
            }
            labels.extend_from_slice(&b.labels);
            sample_tasks.extend(std::iter::repeat_n(t, b.len()));
            row += b.len();
            offsets.push(row);
        }
        Stacked {
            features,
            labels,
            offsets,
            sample_tasks,
        }
    }

    /// Keeps, per task, the rows listed in `rows[t]` (in that order).
    pub fn select(&self, rows: &[Vec<usize>]) -> Result<Self, DataError> {
        let tasks = self
            .tasks
            .iter()
            .zip(rows)
            .map(|(b, idx)| TaskBlock {
                features: if idx.is_empty() {
                    Array2::zeros((0, self.dim))
                } else {
                    b.features.select(Axis(0), idx)
                },
                labels: idx.iter().map(|&i| b.labels[i]).collect(),
            })
            .collect();
        let mut out = MultiTaskDataset::new(self.grid.clone(), self.kind, tasks)?;
        out.dim = self.dim;
        Ok(out)
    }

    /// All samples merged into a single task on the grid `[1]`.
    pub fn pooled(&self) -> Result<Self, DataError> {
        let st = self.stacked();
        MultiTaskDataset::new(
            TaskGrid::flat(1)?,
            self.kind,
            vec![TaskBlock {
                features: st.features,
                labels: st.labels,
            }],
        )
    }

    /// Task `t` alone, on the grid `[1]`.
    pub fn single_task(&self, t: usize) -> Result<Self, DataError> {
        self.grid.check_task(t)?;
        let b = &self.tasks[t];
        if b.is_empty() {
            return Err(DataError::EmptyTask(t));
        }
        MultiTaskDataset::new(TaskGrid::flat(1)?, self.kind, vec![b.clone()])
    }
}

/// Block structure for the true factors: the rows of every mode are split
/// into `groups` contiguous groups that share a prototype row, perturbed by
/// `jitter` times standard normal noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockFactors {
    pub groups: usize,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub shape: Vec<usize>,
    pub d: usize,
    pub rank: usize,
    pub m_train: usize,
    pub m_test: usize,
    pub snr_db: f64,
    /// Skip noise entirely, as if the SNR were infinite.
    #[serde(default)]
    pub noiseless: bool,
    pub kind: ProblemKind,
    pub seed: u64,
    #[serde(default)]
    pub block_factors: Option<BlockFactors>,
}

impl SynthConfig {
    /// The simulation setting used throughout the docs: a `3 x 4 x 5` grid,
    /// `d = 100`, rank 3, 60 training and 20 test samples per task.
    pub fn standard(kind: ProblemKind, snr_db: f64, seed: u64) -> Self {
        SynthConfig {
            shape: vec![3, 4, 5],
            d: 100,
            rank: 3,
            m_train: 60,
            m_test: 20,
            snr_db,
            noiseless: false,
            kind,
            seed,
            block_factors: None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |field, message: &str| Err(DataError::Config { field, message: message.to_string() });
        if self.shape.is_empty() || self.shape.contains(&0) {
            return bad("shape", "needs at least one mode and every mode size >= 1");
        }
        if self.d == 0 {
            return bad("d", "must be positive");
        }
        if self.rank == 0 {
            return bad("rank", "must be positive");
        }
        if self.m_train == 0 {
            return bad("m_train", "must be positive");
        }
        if !self.noiseless && !self.snr_db.is_finite() {
            return bad("snr_db", "must be finite (set noiseless = true for no noise)");
        }
        if !self.noiseless && self.m_train < 2 {
            return bad("m_train", "noise calibration needs at least 2 training samples per task");
        }
        if let Some(b) = self.block_factors {
            if b.groups == 0 || self.shape.iter().any(|&s| s < b.groups) {
                return bad("block_factors.groups", "must be between 1 and the smallest mode size");
            }
            if !(b.jitter >= 0.0 && b.jitter.is_finite()) {
                return bad("block_factors.jitter", "must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// The generating model of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub grid: TaskGrid,
    /// Shared factor `L`, `d x R`.
    pub l: Array2<f64>,
    pub factors: CpFactors,
    /// Rows are `w_t = L u_t`.
    pub weights: Array2<f64>,
    pub biases: Vec<f64>,
    /// Per-task noise scale (zero when noiseless).
    pub sigma: Vec<f64>,
}

impl GroundTruth {
    /// Noise-free response `<w_t, x> + b_t`.
    pub fn response(&self, x: &[f64], t: usize) -> f64 {
        self.weights.row(t).iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.biases[t]
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: MultiTaskDataset,
    pub test: MultiTaskDataset,
    pub truth: GroundTruth,
}

fn sample_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn block_factor(rng: &mut ChaCha8Rng, rows: usize, rank: usize, spec: BlockFactors) -> Array2<f64> {
    let protos = normal_matrix(rng, spec.groups, rank);
    let mut f = Array2::zeros((rows, rank));
    for (i, mut row) in f.axis_iter_mut(Axis(0)).enumerate() {
        let g = i * spec.groups / rows;
        for (r, v) in row.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            *v = protos[[g, r]] + spec.jitter * e;
        }
    }
    f
}

/// Group label of task `t` under [`BlockFactors`]: the tuple of row groups,
/// flattened little-endian.
pub fn block_of_task(grid: &TaskGrid, groups: usize, t: usize) -> usize {
    let multi = grid.delinearize(t).expect("valid task id");
    let mut id = 0;
    let mut stride = 1;
    for (n, &i) in multi.iter().enumerate() {
        let g = (i - 1) * groups / grid.shape()[n];
        id += g * stride;
        stride *= groups;
    }
    id
}

/// Draws `L`, `U^n`, features, noise and biases i.i.d. standard normal and
/// builds `y_t = X_t w_t + b_t (+ noise)`.
///
/// The per-task noise scale makes `20 log10(var(y_clean) / var(noise))`
/// equal the requested SNR on the training rows (sample variances of the
/// realized draws). Test rows use the same scale.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData, DataError> {
    cfg.validate()?;
    let grid = TaskGrid::new(cfg.shape.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = normal_matrix(&mut rng, cfg.d, cfg.rank);
    let mats: Vec<Array2<f64>> = cfg
        .shape
        .iter()
        .map(|&rows| match cfg.block_factors {
            Some(spec) => block_factor(&mut rng, rows, cfg.rank, spec),
            None => normal_matrix(&mut rng, rows, cfg.rank),
        })
        .collect();
    let factors = CpFactors::from_matrices(&grid, mats)?;
    let weights = factors.mixing_matrix(&grid).dot(&l.t());

    let total = grid.total();
    let m = cfg.m_train + cfg.m_test;
    let mut train = Vec::with_capacity(total);
    let mut test = Vec::with_capacity(total);
    let mut biases = Vec::with_capacity(total);
    let mut sigma = Vec::with_capacity(total);
    for t in 0..total {
        let x = normal_matrix(&mut rng, m, cfg.d);
        let noise: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: f64 = StandardNormal.sample(&mut rng);
        let clean: Array1<f64> = x.dot(&weights.row(t)) + b;
        let clean = clean.to_vec();

        let s = if cfg.noiseless {
            0.0
        } else {
            let target = sample_var(&clean[..cfg.m_train]) / 10f64.powf(cfg.snr_db / 20.0);
            let realized = sample_var(&noise[..cfg.m_train]);
            if realized > 0.0 {
                (target / realized).sqrt()
            } else {
                0.0
            }
        };
        let labels: Vec<f64> = clean
            .iter()
            .zip(&noise)
            .map(|(c, e)| {
                let v = c + s * e;
                match cfg.kind {
                    ProblemKind::Regression => v,
                    ProblemKind::Classification => {
                        if v >= 0.0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                }
            })
            .collect();
        train.push(TaskBlock {
            features: x.slice(s![..cfg.m_train, ..]).to_owned(),
            labels: labels[..cfg.m_train].to_vec(),
        });
        test.push(TaskBlock {
            features: x.slice(s![cfg.m_train.., ..]).to_owned(),
            labels: labels[cfg.m_train..].to_vec(),
        });
        biases.push(b);
        sigma.push(s);
    }
    let train = MultiTaskDataset::new(grid.clone(), cfg.kind, train)?;
    let test = if cfg.m_test > 0 {
        MultiTaskDataset::new(grid.clone(), cfg.kind, test)?
    } else {
        // keep an empty but well-formed test set
        MultiTaskDataset {
            grid: grid.clone(),
            dim: cfg.d,
            kind: cfg.kind,
            tasks: test,
        }
    };
    Ok(SynthData {
        train,
        test,
        truth: GroundTruth {
            grid,
            l,
            factors,
            weights,
            biases,
            sigma,
        },
    })
}

/// How to interpret a CSV file: the problem kind and, optionally, the grid
/// shape. Without a shape the grid is inferred from the largest index seen
/// in each task column.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub kind: ProblemKind,
    pub shape: Option<Vec<usize>>,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads `t1,...,tN,label,f1,...,fd` rows. Task indices are 1-based.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<MultiTaskDataset, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: &CsvSchema) -> Result<MultiTaskDataset, DataError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(DataError::Empty)?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let n_modes = cols.iter().take_while(|c| c.starts_with('t')).count();
    if n_modes == 0 {
        return Err(DataError::Header {
            line: 1,
            message: "expected task columns t1,...,tN first".into(),
        });
    }
    for (i, c) in cols[..n_modes].iter().enumerate() {
        if *c != format!("t{}", i + 1) {
            return Err(DataError::Header {
                line: 1,
                message: format!("column {} should be t{}, found {c:?}", i + 1, i + 1),
            });
        }
    }
    if cols.get(n_modes) != Some(&"label") {
        return Err(DataError::Header {
            line: 1,
            message: "missing label column after the task columns".into(),
        });
    }
    let d = cols.len() - n_modes - 1;
    if d == 0 {
        return Err(DataError::Header {
            line: 1,
            message: "no feature columns".into(),
        });
    }
    for (j, c) in cols[n_modes + 1..].iter().enumerate() {
        if *c != format!("f{}", j + 1) {
            return Err(DataError::Header {
                line: 1,
                message: format!("feature column {} should be f{}, found {c:?}", j + 1, j + 1),
            });
        }
    }
    if let Some(shape) = &schema.shape {
        if shape.len() != n_modes {
            return Err(DataError::Header {
                line: 1,
                message: format!("{n_modes} task columns but the grid has {} modes", shape.len()),
            });
        }
    }

    let mut rows: Vec<(usize, Vec<usize>, f64, Vec<f64>)> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(DataError::Ragged {
                line: lineno,
                expected: cols.len(),
                got: fields.len(),
            });
        }
        let mut multi = Vec::with_capacity(n_modes);
        for (mode, f) in fields[..n_modes].iter().enumerate() {
            let size = schema.shape.as_ref().map(|s| s[mode]).unwrap_or(usize::MAX);
            match f.parse::<usize>() {
                Ok(v) if v >= 1 && v <= size => multi.push(v),
                _ => {
                    return Err(DataError::TaskIndex {
                        line: lineno,
                        mode,
                        value: f.to_string(),
                        size,
                    })
                }
            }
        }
        let num = |column: usize| -> Result<f64, DataError> {
            fields[column]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    line: lineno,
                    column: column + 1,
                    value: fields[column].to_string(),
                })
        };
        let label = num(n_modes)?;
        if schema.kind == ProblemKind::Classification && label != 1.0 && label != -1.0 {
            return Err(DataError::Label { line: lineno, value: label });
        }
        let feats = (n_modes + 1..cols.len()).map(num).collect::<Result<Vec<_>, _>>()?;
        rows.push((lineno, multi, label, feats));
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let shape = match &schema.shape {
        Some(s) => s.clone(),
        None => (0..n_modes)
            .map(|mode| rows.iter().map(|r| r.1[mode]).max().unwrap_or(1))
            .collect(),
    };
    let grid = TaskGrid::new(shape)?;
    let mut feats: Vec<Vec<f64>> = vec![Vec::new(); grid.total()];
    let mut labels: Vec<Vec<f64>> = vec![Vec::new(); grid.total()];
    for (_, multi, label, f) in rows {
        let t = grid.linearize(&multi)?;
        feats[t].extend(f);
        labels[t].push(label);
    }
    let tasks = feats
        .into_iter()
        .zip(labels)
        .map(|(f, y)| TaskBlock {
            features: Array2::from_shape_vec((y.len(), d), f).expect("row lengths checked"),
            labels: y,
        })
        .collect();
    MultiTaskDataset::new(grid, schema.kind, tasks)
}

/// Renders a dataset as CSV text, tasks in flat order. Floats use the
/// shortest representation that parses back to the same value.
pub fn to_csv(ds: &MultiTaskDataset) -> String {
    let n = ds.grid().modes();
    let mut out = String::new();
    let header: Vec<String> = (1..=n)
        .map(|i| format!("t{i}"))
        .chain(std::iter::once("label".to_string()))
        .chain((1..=ds.dim()).map(|j| format!("f{j}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (t, b) in ds.tasks().iter().enumerate() {
        let multi = ds.grid().delinearize(t).expect("valid task");
        let prefix: Vec<String> = multi.iter().map(|v| v.to_string()).collect();
        let prefix = prefix.join(",");
        for (row, &y) in b.features.rows().into_iter().zip(&b.labels) {
            out.push_str(&prefix);
            match ds.kind() {
                ProblemKind::Classification => write!(out, ",{}", y as i64).unwrap(),
                ProblemKind::Regression => write!(out, ",{y:?}").unwrap(),
            }
            for v in row {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn save_csv(ds: &MultiTaskDataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, to_csv(ds)).map_err(|e| io_err(path, e))
}

/// Per-task fold labels: `folds[t][i]` is the fold of sample `i` of task `t`.
///
/// Each task's samples are shuffled with a seeded generator and dealt
/// round-robin, so fold sizes within a task differ by at most one. Tasks
/// with a single sample stay in every training split (`None`).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFolds {
    pub k: usize,
    pub folds: Vec<Vec<Option<usize>>>,
}

impl TaskFolds {
    pub fn new(ds: &MultiTaskDataset, k: usize, seed: u64) -> Result<Self, DataError> {
        if k < 2 {
            return Err(DataError::Folds(format!("need k >= 2, got {k}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let folds = ds
            .tasks()
            .iter()
            .map(|b| {
                let mut order: Vec<usize> = (0..b.len()).collect();
                order.shuffle(&mut rng);
                let mut f = vec![None; b.len()];
                if b.len() >= 2 {
                    for (pos, &i) in order.iter().enumerate() {
                        f[i] = Some(pos % k);
                    }
                }
                f
            })
            .collect();
        Ok(TaskFolds { k, folds })
    }

    /// `(training rows, validation rows)` per task for one fold.
    pub fn split(&self, fold: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let mut train = Vec::with_capacity(self.folds.len());
        let mut valid = Vec::with_capacity(self.folds.len());
        for f in &self.folds {
            let (v, t): (Vec<usize>, Vec<usize>) = (0..f.len()).partition(|&i| f[i] == Some(fold));
            train.push(t);
            valid.push(v);
        }
        (train, valid)
    }
}
