// The two control models next to the tensorized one: a separate model per
// task and one model for all pooled samples.

use std::error::Error;

use tensor_mtl::baselines::{train_independent, train_pooled};
use tensor_mtl::data::{synth_generate, ProblemKind, SynthConfig};
use tensor_mtl::metrics::{evaluate, Report};
use tensor_mtl::train::{train, TrainConfig, Variant};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let synth = SynthConfig {
        shape: vec![2, 3],
        d: 10,
        rank: 2,
        m_train: 25,
        m_test: 20,
        ..SynthConfig::standard(ProblemKind::Regression, 15.0, 9)
    };
    let data = synth_generate(&synth)?;
    let cfg = TrainConfig {
        rank: 2,
        c: 0.25,
        seed: 9,
        ..TrainConfig::new(Variant::Svr)
    };
    let truth: Vec<Vec<f64>> = data.test.tasks().iter().map(|b| b.labels.clone()).collect();
    let rmse = |pred: Vec<Vec<f64>>| -> Result<f64, Box<dyn Error>> {
        match evaluate(&truth, &pred, false)?.pooled {
            Report::Regression(r) => Ok(r.rmse),
            Report::Classification(_) => Err("expected regression".into()),
        }
    };
    let tensor = rmse(train(&data.train, &cfg)?.model.predict_dataset(&data.test)?)?;
    let indep = rmse(train_independent(&data.train, &cfg)?.0.predict_dataset(&data.test)?)?;
    let pooled = rmse(train_pooled(&data.train, &cfg)?.0.predict_dataset(&data.test)?)?;
    println!("held-out RMSE  tensorized {tensor:.3}  independent {indep:.3}  pooled {pooled:.3}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
