// Pick C and the rank by 5-fold cross-validation with task-stratified folds.

use std::error::Error;

use tensor_mtl::cv::{kfold_cv, CvGrid, CvModel};
use tensor_mtl::data::{synth_generate, ProblemKind, SynthConfig};
use tensor_mtl::train::{TrainConfig, Variant};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let synth = SynthConfig {
        shape: vec![2, 3],
        d: 8,
        rank: 2,
        m_train: 20,
        m_test: 1,
        ..SynthConfig::standard(ProblemKind::Regression, 30.0, 5)
    };
    let data = synth_generate(&synth)?;
    let grid = CvGrid {
        c: vec![0.125, 1.0, 8.0],
        rank: vec![1, 2, 3],
        gamma: Vec::new(),
    };
    let base = TrainConfig::new(Variant::Lssvr);
    let report = kfold_cv(&data.train, &grid, &base, CvModel::Tensorized, 5, 5)?;
    print!("{}", report.to_csv());
    let best = report.best();
    println!("best: C = {}, rank = {} (mean {} {:.4})", best.c, best.rank, report.metric, report.cells[report.best_index].mean);
    if best.rank == 1 {
        return Err("rank 1 cannot represent rank-2 data".into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
