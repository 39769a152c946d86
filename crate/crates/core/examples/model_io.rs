// Save a trained model to JSON, load it back and check that predictions
// are bit-for-bit identical.

use std::error::Error;

use tensor_mtl::data::{synth_generate, ProblemKind, SynthConfig};
use tensor_mtl::model_io::AnyModel;
use tensor_mtl::train::{train, TrainConfig, Variant};
use tensor_mtl::KernelSpec;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let synth = SynthConfig {
        shape: vec![3],
        d: 5,
        rank: 1,
        m_train: 15,
        m_test: 5,
        ..SynthConfig::standard(ProblemKind::Regression, 20.0, 1)
    };
    let data = synth_generate(&synth)?;
    let cfg = TrainConfig {
        rank: 1,
        kernel: KernelSpec::rbf(0.05)?,
        ..TrainConfig::new(Variant::Svr)
    };
    let model = AnyModel::Tensorized(train(&data.train, &cfg)?.model);

    let path = std::env::temp_dir().join(format!("tmtl-model-io-{}.json", std::process::id()));
    model.save(&path)?;
    let loaded = AnyModel::load(&path)?;
    std::fs::remove_file(&path)?;

    let before = model.predict_dataset(&data.test)?;
    let after = loaded.predict_dataset(&data.test)?;
    let same = before.concat().iter().zip(after.concat().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("{} predictions, identical after reload: {same}", before.concat().len());
    if !same || loaded != model {
        return Err("round trip changed the model".into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
