//! Tensorized multitask SVMs and LSSVMs.
//!
//! Tasks live on a multi-dimensional grid (for example region x season x
//! product). Each task's weight vector is `w_t = L u_t`, where the shared
//! factor `L` is kept in kernel (dual) form and the mixing vector `u_t` is
//! the elementwise product of one row from each mode's CP factor. Training
//! alternates between a dual subproblem for `L` over all samples and one per
//! factor row: convex QPs for the SVM variants and saddle-point linear
//! systems for the least-squares variants.
//!
//! ```no_run
//! use tensor_mtl::data::{synth_generate, ProblemKind, SynthConfig};
//! use tensor_mtl::train::{train, TrainConfig, Variant};
//!
//! let data = synth_generate(&SynthConfig::standard(ProblemKind::Regression, 10.0, 1))?;
//! let out = train(&data.train, &TrainConfig::new(Variant::Lssvr))?;
//! let predictions = out.model.predict_dataset(&data.test)?;
//! # let _ = predictions;
//! # Ok::<(), tensor_mtl::Error>(())
//! ```

pub mod baselines;
pub mod cli;
pub mod cp;
pub mod cv;
pub mod data;
pub mod kernels;
pub mod linsolve;
pub mod metrics;
pub mod model_io;
pub mod qp;
pub mod train;

pub use cp::{CpFactors, TaskGrid};
pub use data::{MultiTaskDataset, ProblemKind};
pub use kernels::KernelSpec;
pub use train::{train, TrainConfig, TrainedModel, Variant};

/// Any error the library can return.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Index(#[from] cp::IndexError),
    #[error(transparent)]
    Kernel(#[from] kernels::KernelError),
    #[error(transparent)]
    Qp(#[from] qp::QpError),
    #[error(transparent)]
    Linsolve(#[from] linsolve::LinsolveError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    ModelIo(#[from] model_io::ModelIoError),
    #[error(transparent)]
    Cv(#[from] cv::CvError),
}
