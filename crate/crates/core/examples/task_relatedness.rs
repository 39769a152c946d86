// Task relatedness `<u_t, u_q>` learned from data whose true factors come in
// blocks: tasks in the same block end up more related than across blocks.

use std::error::Error;

use tensor_mtl::data::{block_of_task, synth_generate, BlockFactors, ProblemKind, SynthConfig};
use tensor_mtl::train::{train, TrainConfig, Variant};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let synth = SynthConfig {
        shape: vec![4, 4],
        d: 10,
        rank: 2,
        m_train: 30,
        m_test: 1,
        block_factors: Some(BlockFactors { groups: 2, jitter: 0.1 }),
        ..SynthConfig::standard(ProblemKind::Regression, 30.0, 2)
    };
    let data = synth_generate(&synth)?;
    let cfg = TrainConfig {
        rank: 2,
        seed: 2,
        ..TrainConfig::new(Variant::Lssvr)
    };
    let model = train(&data.train, &cfg)?.model;
    let gram = model.relatedness();

    // Normalize to cosines so task scale does not dominate.
    let grid = data.train.grid();
    let t = grid.total();
    let (mut within, mut across) = ((0.0, 0), (0.0, 0));
    for a in 0..t {
        for b in 0..t {
            if a == b {
                continue;
            }
            let cos = gram[[a, b]] / (gram[[a, a]] * gram[[b, b]]).sqrt();
            if block_of_task(grid, 2, a) == block_of_task(grid, 2, b) {
                within = (within.0 + cos, within.1 + 1);
            } else {
                across = (across.0 + cos, across.1 + 1);
            }
        }
    }
    let (w, c) = (within.0 / within.1 as f64, across.0 / across.1 as f64);
    println!("mean cosine relatedness: within blocks {w:.3}, across blocks {c:.3}");
    if w <= c {
        return Err("block structure not recovered".into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
