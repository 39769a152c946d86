//! The `tmtl` command line: argument parsing, config files, manifests and
//! exit codes.
//!
//! Settings are resolved in three layers: built-in defaults, then the TOML
//! file given with `--config`, then command-line flags.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{train_independent, train_pooled};
use crate::cv::{kfold_cv, CvError, CvGrid, CvModel};
use crate::data::{load_csv, save_csv, synth_generate, CsvSchema, DataError, MultiTaskDataset, ProblemKind, SynthConfig};
use crate::kernels::KernelSpec;
use crate::metrics::{evaluate, MetricsError};
use crate::model_io::{AnyModel, ModelIoError};
use crate::train::{train, Timing, TrainConfig, TrainError, Variant};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
    #[error(transparent)]
    Cv(#[from] CvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("cannot join predictions with the data: {0}")]
    Join(String),
}

impl CliError {
    /// 2 usage (reported by the parser), 3 i/o, 4 data or parse, 5 config,
    /// 6 solver, 7 unsupported operation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 3,
            CliError::Data(e) => data_code(e),
            CliError::Config(_) => 5,
            CliError::Train(e) => train_code(e),
            CliError::ModelIo(ModelIoError::Io { .. }) => 3,
            CliError::ModelIo(_) => 4,
            CliError::Cv(CvError::EmptyGrid) => 5,
            CliError::Cv(CvError::Data(e)) => data_code(e),
            CliError::Cv(CvError::Train { source, .. }) => train_code(source),
            CliError::Cv(CvError::Score { .. }) | CliError::Metrics(_) => 4,
            CliError::Unsupported(_) => 7,
            CliError::Join(_) => 4,
        }
    }
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Io { .. } => 3,
        DataError::Config { .. } | DataError::Folds(_) => 5,
        _ => 4,
    }
}

fn train_code(e: &TrainError) -> i32 {
    match e {
        TrainError::Config(_) | TrainError::KindMismatch { .. } | TrainError::Kernel(_) => 5,
        TrainError::Subproblem { .. } => 6,
        TrainError::Data(d) => data_code(d),
        TrainError::Index(_) | TrainError::Dimension { .. } => 4,
    }
}

#[derive(Debug, Parser)]
#[command(name = "tmtl", version, about = "Tensorized multitask SVM and LSSVM toolkit")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic CP-structured dataset.
    Synth(SynthArgs),
    /// Train a tensorized model or a baseline.
    Train(TrainArgs),
    /// Cross-validate over a hyperparameter grid.
    Cv(CvArgs),
    /// Write predictions for a dataset.
    Predict(PredictArgs),
    /// Score a model on a labelled dataset.
    Eval(EvalArgs),
    /// Export the task-relatedness Gram of a trained model.
    Relatedness(RelatednessArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelKind {
    Linear,
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Independent,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Regression,
    Classification,
}

/// Model settings shared by `train` and `cv`.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// tsvc, tsvr, tlssvc or tlssvr.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelKind>,
    /// RBF width in `exp(-gamma ||x - z||^2)`.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long = "C")]
    pub c: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub stop_threshold: Option<f64>,
    #[arg(long)]
    pub early_stop: bool,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Random starts; the fit with the lowest objective is kept.
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DataFlags {
    /// CSV with columns `t1,...,tN,label,f1,...,fd`.
    #[arg(long)]
    pub data: PathBuf,
    /// Grid shape such as `3,4,5`; inferred from the task columns if absent.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    /// Feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Rank of the generating factors.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub m_train: Option<usize>,
    #[arg(long)]
    pub m_test: Option<usize>,
    /// Signal-to-noise ratio in dB, as 20 log10 of the variance ratio.
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Train a control model instead of the tensorized one.
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Comma-separated C values (default `2^-5, 2^-3, ..., 2^15`).
    #[arg(long, value_delimiter = ',')]
    pub grid_c: Option<Vec<f64>>,
    /// Comma-separated ranks (default `1,...,5`).
    #[arg(long, value_delimiter = ',')]
    pub grid_rank: Option<Vec<usize>>,
    /// Comma-separated rbf gammas (default `2^-15, 2^-13, ..., 2^3`).
    #[arg(long, value_delimiter = ',')]
    pub grid_gamma: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Per-cell score table (CSV).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    /// CSV with `task,prediction` rows, grouped by task and in input order
    /// within each task.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Score this model's predictions on the data.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub model: Option<PathBuf>,
    /// Score a `task,prediction` file as written by `predict`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Problem kind of the data when scoring a predictions file.
    #[arg(long, value_enum, requires = "predictions")]
    pub kind: Option<KindArg>,
    #[command(flatten)]
    pub data: DataFlags,
    /// Include one block of scores per task.
    #[arg(long)]
    pub per_task: bool,
    /// Write the report as CSV here instead of `key=value` lines on stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RelatednessArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Also write the `<w_t, w_q>` Gram to `<stem>.weights.csv` next to
    /// `--out` (linear kernel only).
    #[arg(long)]
    pub weights: bool,
    /// `T x T` matrix as CSV.
    #[arg(long)]
    pub out: PathBuf,
}

/// Optional fields of the `[synth]` config table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub kind: Option<ProblemKind>,
    pub shape: Option<Vec<usize>>,
    pub d: Option<usize>,
    pub rank: Option<usize>,
    pub m_train: Option<usize>,
    pub m_test: Option<usize>,
    pub snr_db: Option<f64>,
    pub noiseless: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub folds: Option<usize>,
    pub c: Option<Vec<f64>>,
    pub rank: Option<Vec<usize>>,
    pub gamma: Option<Vec<f64>>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub format_version: u32,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub cv: Option<CvSection>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "config format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::parse(&read(path)?)
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_config(path: Option<&Path>) -> Result<Option<ConfigFile>, CliError> {
    path.map(ConfigFile::load).transpose()
}

/// Defaults, then the `[train]` table, then flags.
pub fn resolve_train_config(flags: &ModelFlags, file: Option<&ConfigFile>) -> Result<TrainConfig, CliError> {
    let mut cfg = file.and_then(|f| f.train.clone()).unwrap_or_default();
    if let Some(v) = flags.variant {
        cfg.variant = v;
    }
    match (flags.kernel, flags.gamma) {
        (Some(KernelKind::Linear), Some(_)) => {
            return Err(CliError::Config("--gamma only applies to --kernel rbf".into()));
        }
        (Some(KernelKind::Linear), None) => cfg.kernel = KernelSpec::Linear,
        (Some(KernelKind::Rbf), gamma) => {
            let gamma = match (gamma, cfg.kernel) {
                (Some(g), _) => g,
                (None, KernelSpec::Rbf { gamma }) => gamma,
                (None, KernelSpec::Linear) => return Err(CliError::Config("--kernel rbf needs --gamma".into())),
            };
            cfg.kernel = KernelSpec::Rbf { gamma };
        }
        (None, Some(g)) => match cfg.kernel {
            KernelSpec::Rbf { .. } => cfg.kernel = KernelSpec::Rbf { gamma: g },
            KernelSpec::Linear => return Err(CliError::Config("--gamma only applies to an rbf kernel".into())),
        },
        (None, None) => {}
    }
    if let Some(c) = flags.c {
        cfg.c = c;
    }
    if let Some(r) = flags.rank {
        cfg.rank = r;
    }
    if let Some(e) = flags.epsilon {
        cfg.epsilon = e;
    }
    if let Some(s) = flags.stop_threshold {
        cfg.stop_threshold = s;
    }
    if flags.early_stop {
        cfg.early_stop = true;
    }
    if let Some(m) = flags.max_iters {
        cfg.max_outer_iters = m;
    }
    if let Some(r) = flags.restarts {
        cfg.restarts = r;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults are the 3 x 4 x 5 regression setting at 10 dB.
pub fn resolve_synth_config(args: &SynthArgs, file: Option<&ConfigFile>) -> Result<SynthConfig, CliError> {
    let sec = file.and_then(|f| f.synth.clone()).unwrap_or_default();
    let kind = match args.kind {
        Some(KindArg::Regression) => ProblemKind::Regression,
        Some(KindArg::Classification) => ProblemKind::Classification,
        None => sec.kind.unwrap_or(ProblemKind::Regression),
    };
    let base = SynthConfig::standard(kind, 10.0, 0);
    let cfg = SynthConfig {
        shape: args.shape.clone().or(sec.shape).unwrap_or(base.shape),
        d: args.dim.or(sec.d).unwrap_or(base.d),
        rank: args.rank.or(sec.rank).unwrap_or(base.rank),
        m_train: args.m_train.or(sec.m_train).unwrap_or(base.m_train),
        m_test: args.m_test.or(sec.m_test).unwrap_or(base.m_test),
        snr_db: args.snr.or(sec.snr_db).unwrap_or(base.snr_db),
        noiseless: args.noiseless || sec.noiseless.unwrap_or(false),
        kind,
        seed: args.seed.or(sec.seed).unwrap_or(base.seed),
        block_factors: None,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command. Only `timing` varies between
/// identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub results: serde_json::Value,
    pub timing: Timing,
}

fn digest(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn write_manifest(
    path: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
    results: serde_json::Value,
    timing: Timing,
) -> Result<(), CliError> {
    let manifest = Manifest {
        tool: "tmtl".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config,
        inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
        outputs: outputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
        results,
        timing,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(path, &text)
}

/// `<out>.manifest.json` next to the output file.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn load_data(flags: &DataFlags, kind: ProblemKind) -> Result<MultiTaskDataset, CliError> {
    let schema = CsvSchema {
        kind,
        shape: flags.shape.clone(),
    };
    Ok(load_csv(&flags.data, &schema)?)
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("value serializes")
}

fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = load_config(args.config.as_deref())?;
    let cfg = resolve_synth_config(args, file.as_ref())?;
    let data = synth_generate(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|source| CliError::Io {
        path: args.out.display().to_string(),
        source,
    })?;
    let train_path = args.out.join("train.csv");
    let test_path = args.out.join("test.csv");
    let truth_path = args.out.join("truth.json");
    save_csv(&data.train, &train_path)?;
    save_csv(&data.test, &test_path)?;
    write(&truth_path, &serde_json::to_string_pretty(&data.truth).expect("truth serializes"))?;
    let timing = Timing {
        total: start.elapsed().as_secs_f64(),
        ..Timing::default()
    };
    write_manifest(
        &args.out.join("manifest.json"),
        "synth",
        to_json(&cfg),
        &[],
        &[&train_path, &test_path, &truth_path],
        serde_json::json!({ "tasks": data.train.num_tasks(), "train_rows": data.train.num_samples(), "test_rows": data.test.num_samples() }),
        timing,
    )?;
    println!("wrote {} and {}", train_path.display(), test_path.display());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = load_config(args.model.config.as_deref())?;
    let cfg = resolve_train_config(&args.model, file.as_ref())?;
    let data = load_data(&args.data, cfg.variant.kind())?;
    let (model, results, mut timing) = match args.baseline {
        None => {
            let out = train(&data, &cfg)?;
            let results = serde_json::json!({
                "outer_iterations": out.model.meta.outer_iterations,
                "converged": out.trace.converged,
                "relative_errors": out.trace.relative_errors(),
                "final_relative_error": out.model.meta.final_relative_error,
            });
            (AnyModel::Tensorized(out.model), results, out.timing)
        }
        Some(kind) => {
            let (m, t) = match kind {
                BaselineArg::Independent => train_independent(&data, &cfg)?,
                BaselineArg::Pooled => train_pooled(&data, &cfg)?,
            };
            (AnyModel::Baseline(m), serde_json::json!({ "baseline": to_json(&kind_name(kind)) }), t)
        }
    };
    model.save(&args.out)?;
    timing.total = start.elapsed().as_secs_f64();
    write_manifest(
        &manifest_path(&args.out),
        "train",
        to_json(&cfg),
        &[&args.data.data],
        &[&args.out],
        results,
        timing,
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn kind_name(kind: BaselineArg) -> &'static str {
    match kind {
        BaselineArg::Independent => "independent",
        BaselineArg::Pooled => "pooled",
    }
}

fn run_cv(args: &CvArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = load_config(args.model.config.as_deref())?;
    let base = resolve_train_config(&args.model, file.as_ref())?;
    let sec = file.as_ref().and_then(|f| f.cv.clone()).unwrap_or_default();
    let defaults = CvGrid::default();
    let grid = CvGrid {
        c: args.grid_c.clone().or(sec.c).unwrap_or(defaults.c),
        rank: args.grid_rank.clone().or(sec.rank).unwrap_or(defaults.rank),
        gamma: args.grid_gamma.clone().or(sec.gamma).unwrap_or(defaults.gamma),
    };
    let k = args.folds.or(sec.folds).unwrap_or(5);
    let model = match args.baseline {
        None => CvModel::Tensorized,
        Some(BaselineArg::Independent) => CvModel::Independent,
        Some(BaselineArg::Pooled) => CvModel::Pooled,
    };
    let data = load_data(&args.data, base.variant.kind())?;
    let report = kfold_cv(&data, &grid, &base, model, k, base.seed)?;
    write(&args.out, &report.to_csv())?;
    let best = report.best();
    let timing = Timing {
        total: start.elapsed().as_secs_f64(),
        ..Timing::default()
    };
    write_manifest(
        &manifest_path(&args.out),
        "cv",
        serde_json::json!({ "base": to_json(&base), "grid": to_json(&grid), "folds": k, "model": to_json(&model) }),
        &[&args.data.data],
        &[&args.out],
        serde_json::json!({ "metric": report.metric, "best": to_json(best), "best_score": report.cells[report.best_index].mean }),
        timing,
    )?;
    println!("best C={} rank={} kernel={} {}={}", best.c, best.rank, best.kernel, report.metric, report.cells[report.best_index].mean);
    Ok(())
}

fn load_for_model(model_path: &Path, flags: &DataFlags) -> Result<(AnyModel, MultiTaskDataset), CliError> {
    let model = AnyModel::load(model_path)?;
    let flags = DataFlags {
        shape: flags.shape.clone().or_else(|| Some(model.grid().shape().to_vec())),
        ..flags.clone()
    };
    let data = load_data(&flags, model.variant().kind())?;
    Ok((model, data))
}

fn run_predict(args: &PredictArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let (model, data) = load_for_model(&args.model, &args.data)?;
    let pred = model.predict_dataset(&data)?;
    let mut s = String::from("task,prediction\n");
    for (t, p) in pred.iter().enumerate() {
        for v in p {
            writeln!(s, "{t},{v:?}").unwrap();
        }
    }
    write(&args.out, &s)?;
    let timing = Timing {
        total: start.elapsed().as_secs_f64(),
        ..Timing::default()
    };
    write_manifest(
        &manifest_path(&args.out),
        "predict",
        serde_json::Value::Null,
        &[&args.model, &args.data.data],
        &[&args.out],
        serde_json::json!({ "rows": data.num_samples() }),
        timing,
    )?;
    Ok(())
}

/// Reads `task,prediction` rows and lines them up with the task blocks of
/// `data`: the k-th prediction of task t belongs to its k-th sample.
fn join_predictions(path: &Path, data: &MultiTaskDataset) -> Result<Vec<Vec<f64>>, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == "task,prediction" => {}
        _ => return Err(CliError::Join(format!("{}: expected the header task,prediction", path.display()))),
    }
    let mut pred: Vec<Vec<f64>> = vec![Vec::new(); data.num_tasks()];
    for (no, line) in lines {
        let bad = || CliError::Join(format!("{}:{}: expected `task,prediction`, got {line:?}", path.display(), no + 1));
        let (t, v) = line.split_once(',').ok_or_else(bad)?;
        let t: usize = t.trim().parse().map_err(|_| bad())?;
        let v: f64 = v.trim().parse().map_err(|_| bad())?;
        pred.get_mut(t)
            .ok_or_else(|| CliError::Join(format!("task {t} is outside the data's {} tasks", data.num_tasks())))?
            .push(v);
    }
    for (t, (p, b)) in pred.iter().zip(data.tasks()).enumerate() {
        if p.len() != b.len() {
            return Err(CliError::Join(format!("task {t} has {} predictions for {} samples", p.len(), b.len())));
        }
    }
    Ok(pred)
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (pred, data, classification, inputs) = match (&args.model, &args.predictions) {
        (Some(model_path), _) => {
            let (model, data) = load_for_model(model_path, &args.data)?;
            let pred = model.predict_dataset(&data)?;
            (pred, data, model.variant().is_classification(), vec![model_path.as_path()])
        }
        (None, Some(pred_path)) => {
            let kind = match args.kind {
                Some(KindArg::Classification) => ProblemKind::Classification,
                _ => ProblemKind::Regression,
            };
            let data = load_data(&args.data, kind)?;
            let pred = join_predictions(pred_path, &data)?;
            (pred, data, kind == ProblemKind::Classification, vec![pred_path.as_path()])
        }
        (None, None) => return Err(CliError::Config("eval needs --model or --predictions".into())),
    };
    let truth: Vec<Vec<f64>> = data.tasks().iter().map(|b| b.labels.clone()).collect();
    let report = evaluate(&truth, &pred, classification)?;
    match &args.out {
        Some(out) => {
            let start = Instant::now();
            write(out, &report.to_csv())?;
            let timing = Timing {
                total: start.elapsed().as_secs_f64(),
                ..Timing::default()
            };
            let mut all_inputs = inputs;
            all_inputs.push(&args.data.data);
            write_manifest(
                &manifest_path(out),
                "eval",
                serde_json::Value::Null,
                &all_inputs,
                &[out],
                to_json(&report.pooled),
                timing,
            )?;
        }
        None => print!("{}", report.to_key_value(args.per_task)),
    }
    Ok(())
}

fn matrix_csv(m: &ndarray::Array2<f64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

/// `<stem>.weights.csv` next to `out`.
pub fn weights_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().map(OsString::from).unwrap_or_default();
    name.push(".weights.csv");
    out.with_file_name(name)
}

fn run_relatedness(args: &RelatednessArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let AnyModel::Tensorized(model) = AnyModel::load(&args.model)? else {
        return Err(CliError::Unsupported("baseline models have no task factors".into()));
    };
    let weights = if args.weights {
        if !model.kernel.is_linear() {
            return Err(CliError::Unsupported(format!(
                "explicit weights need a linear kernel, the model uses {}",
                model.kernel
            )));
        }
        Some(crate::cp::weight_gram(&model.explicit_weights()?))
    } else {
        None
    };
    let gram = model.relatedness();
    write(&args.out, &matrix_csv(&gram))?;
    let weights_out = weights_path(&args.out);
    let mut outputs = vec![args.out.as_path()];
    if let Some(w) = &weights {
        write(&weights_out, &matrix_csv(w))?;
        outputs.push(&weights_out);
    }
    let timing = Timing {
        total: start.elapsed().as_secs_f64(),
        ..Timing::default()
    };
    write_manifest(
        &manifest_path(&args.out),
        "relatedness",
        serde_json::json!({ "weights": args.weights }),
        &[&args.model],
        &outputs,
        serde_json::json!({ "tasks": gram.nrows() }),
        timing,
    )?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Cv(a) => run_cv(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Relatedness(a) => run_relatedness(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("TENSOR_MTL_LOG", "warn")).try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set the thread count: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
