// Trade accuracy for time with the loose stopping threshold.

use std::error::Error;

use tensor_mtl::data::{synth_generate, ProblemKind, SynthConfig};
use tensor_mtl::metrics::{evaluate, Report};
use tensor_mtl::train::{train, TrainConfig, Variant};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let synth = SynthConfig {
        shape: vec![3, 3],
        d: 15,
        rank: 2,
        m_train: 30,
        m_test: 20,
        ..SynthConfig::standard(ProblemKind::Regression, 20.0, 4)
    };
    let data = synth_generate(&synth)?;
    let truth: Vec<Vec<f64>> = data.test.tasks().iter().map(|b| b.labels.clone()).collect();
    for early_stop in [false, true] {
        let cfg = TrainConfig {
            rank: 2,
            seed: 4,
            early_stop,
            ..TrainConfig::new(Variant::Lssvr)
        };
        let out = train(&data.train, &cfg)?;
        let Report::Regression(r) = evaluate(&truth, &out.model.predict_dataset(&data.test)?, false)?.pooled else {
            return Err("expected regression".into());
        };
        println!(
            "threshold {:.0e}: {:>2} iterations, {:.3}s, RMSE {:.4}, RE trace {:.3?}",
            cfg.threshold(),
            out.model.meta.outer_iterations,
            out.timing.total,
            r.rmse,
            out.trace.relative_errors()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
