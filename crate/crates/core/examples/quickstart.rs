// Fit a tensorized least-squares SVR on a small synthetic grid of tasks and
// compare it with one model per task.

use std::error::Error;

use tensor_mtl::baselines::train_independent;
use tensor_mtl::data::{synth_generate, ProblemKind, SynthConfig};
use tensor_mtl::metrics::{evaluate, Report};
use tensor_mtl::train::{train, TrainConfig, Variant};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    // 2 x 3 = 6 tasks sharing a rank-2 structure, 12 features, 30 samples each.
    let synth = SynthConfig {
        shape: vec![2, 3],
        d: 12,
        rank: 2,
        m_train: 30,
        m_test: 20,
        ..SynthConfig::standard(ProblemKind::Regression, 20.0, 7)
    };
    let data = synth_generate(&synth)?;

    let cfg = TrainConfig {
        rank: 2,
        seed: 7,
        ..TrainConfig::new(Variant::Lssvr)
    };
    let out = train(&data.train, &cfg)?;
    let re = out.model.meta.final_relative_error.unwrap_or(f64::NAN);
    println!("tLSSVR: {} outer iterations, final RE {re:.2e}", out.model.meta.outer_iterations);

    let truth: Vec<Vec<f64>> = data.test.tasks().iter().map(|b| b.labels.clone()).collect();
    let tensor = evaluate(&truth, &out.model.predict_dataset(&data.test)?, false)?;
    let (indep, _) = train_independent(&data.train, &cfg)?;
    let single = evaluate(&truth, &indep.predict_dataset(&data.test)?, false)?;

    let (Report::Regression(a), Report::Regression(b)) = (tensor.pooled, single.pooled) else {
        return Err("expected regression reports".into());
    };
    println!("held-out RMSE: tensorized {:.3}, independent {:.3}", a.rmse, b.rmse);
    println!("held-out Q2:   tensorized {:.3}, independent {:.3}", a.q2, b.q2);
    if a.rmse >= b.rmse {
        return Err("sharing across tasks should help on this data".into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
