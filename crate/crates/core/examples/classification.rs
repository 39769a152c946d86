// Tensorized SVC and LSSVC on a grid of binary classification tasks.

use std::error::Error;

use tensor_mtl::data::{synth_generate, ProblemKind, SynthConfig};
use tensor_mtl::metrics::{evaluate, Report};
use tensor_mtl::train::{train, TrainConfig, Variant};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let synth = SynthConfig {
        shape: vec![2, 2],
        d: 8,
        rank: 2,
        m_train: 40,
        m_test: 40,
        ..SynthConfig::standard(ProblemKind::Classification, 40.0, 3)
    };
    let data = synth_generate(&synth)?;
    let truth: Vec<Vec<f64>> = data.test.tasks().iter().map(|b| b.labels.clone()).collect();

    for variant in [Variant::Svc, Variant::Lssvc] {
        let cfg = TrainConfig {
            rank: 2,
            c: 1.0,
            seed: 3,
            ..TrainConfig::new(variant)
        };
        let out = train(&data.train, &cfg)?;
        let report = evaluate(&truth, &out.model.predict_dataset(&data.test)?, true)?;
        let Report::Classification(r) = report.pooled else {
            return Err("expected a classification report".into());
        };
        println!(
            "{}: accuracy {:.3}, precision {:.3}, recall {:.3}, F1 {:.3} after {} iterations",
            variant, r.accuracy, r.precision, r.recall, r.f1, out.model.meta.outer_iterations
        );
        if r.accuracy < 0.7 {
            return Err(format!("{variant} accuracy {:.3} is unexpectedly low", r.accuracy).into());
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
