//! Randomized invariant checks. Each check runs `CASES` generated instances
//! through a proptest runner and reports the first failure (after
//! shrinking) as an error string.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

use tensor_mtl::baselines::train_independent;
use tensor_mtl::cp::DualSharedFactor;
use tensor_mtl::data::{parse_csv, synth_generate, to_csv, CsvSchema, SynthConfig, TaskBlock, TaskFolds};
use tensor_mtl::kernels::{lphi, weighted_gram_q, GramCache};
use tensor_mtl::linsolve::{solve_saddle, PdSolver};
use tensor_mtl::metrics::{correlation, evaluate, q2, rmse, Report};
use tensor_mtl::model_io::AnyModel;
use tensor_mtl::qp::{solve_qp, QpOptions};
use tensor_mtl::train::{train, train_from, Trainer};
use tensor_mtl::{CpFactors, KernelSpec, MultiTaskDataset, ProblemKind, TaskGrid, TrainConfig, Variant};

use super::*;

pub const CASES: u32 = 100;

pub type Check = fn() -> Result<(), String>;

/// Every check, by name.
pub const ALL: &[(&str, Check)] = &[
    ("linearize_round_trip", linearize_round_trip),
    ("relatedness_gram_is_psd_outer_product", relatedness_gram_is_psd_outer_product),
    ("weight_gram_identity", weight_gram_identity),
    ("mixing_vectors_are_multilinear", mixing_vectors_are_multilinear),
    ("rescaling_two_modes_keeps_mixing", rescaling_two_modes_keeps_mixing),
    ("weighted_gram_is_psd", weighted_gram_is_psd),
    ("lphi_dual_matches_explicit", lphi_dual_matches_explicit),
    ("weighted_gram_with_unit_mixing", weighted_gram_with_unit_mixing),
    ("qp_matches_projected_gradient", qp_matches_projected_gradient),
    ("qp_equalities_hold", qp_equalities_hold),
    ("qp_objective_is_monotone", qp_objective_is_monotone),
    ("qp_is_deterministic", qp_is_deterministic),
    ("saddle_block_equations", saddle_block_equations),
    ("saddle_matches_dense_solve", saddle_matches_dense_solve),
    ("cholesky_matches_lu", cholesky_matches_lu),
    ("l_step_equalities_hold", l_step_equalities_hold),
    ("factor_row_is_stationary_point", factor_row_is_stationary_point),
    ("training_is_deterministic", training_is_deterministic),
    ("dual_and_primal_predictions_agree", dual_and_primal_predictions_agree),
    ("model_json_round_trip", model_json_round_trip),
    ("snr_round_trip", snr_round_trip),
    ("folds_partition_tasks", folds_partition_tasks),
    ("csv_round_trip", csv_round_trip),
    ("metric_invariances", metric_invariances),
    ("pooled_rmse_is_weighted_mean", pooled_rmse_is_weighted_mean),
    ("frozen_rank_one_is_independent_baseline", frozen_rank_one_is_independent_baseline),
];

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        rng_seed: RngSeed::Fixed(0x5eed),
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..=3)
}

fn random_factors(rng: &mut rand_chacha::ChaCha8Rng, grid: &TaskGrid, rank: usize) -> CpFactors {
    let mats = grid.shape().iter().map(|&r| normal_matrix(rng, r, rank)).collect();
    CpFactors::from_matrices(grid, mats).unwrap()
}

/// A small random dataset with `m` samples in every task.
fn small_dataset(seed: u64, shape: Vec<usize>, d: usize, m: usize, kind: ProblemKind) -> MultiTaskDataset {
    let cfg = SynthConfig {
        shape,
        d,
        rank: 2,
        m_train: m,
        m_test: 1,
        ..SynthConfig::standard(kind, 20.0, seed)
    };
    synth_generate(&cfg).unwrap().train
}

fn variant_strategy() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::Svc), Just(Variant::Svr), Just(Variant::Lssvc), Just(Variant::Lssvr)]
}

fn small_config(variant: Variant, seed: u64, rank: usize) -> TrainConfig {
    TrainConfig {
        rank,
        seed,
        c: 1.0,
        max_outer_iters: 3,
        ..TrainConfig::new(variant)
    }
}

pub fn linearize_round_trip() -> Result<(), String> {
    run(shape_strategy(), |shape| {
        let grid = TaskGrid::new(shape).unwrap();
        for t in 0..grid.total() {
            let multi = grid.delinearize(t).unwrap();
            ensure(grid.linearize(&multi).unwrap() == t, || format!("task {t} -> {multi:?}"))?;
        }
        Ok(())
    })
}

pub fn relatedness_gram_is_psd_outer_product() -> Result<(), String> {
    run((shape_strategy(), 1usize..=4, any::<u64>()), |(shape, rank, seed)| {
        let grid = TaskGrid::new(shape).unwrap();
        let f = random_factors(&mut rng(seed), &grid, rank);
        let g = f.mixing_matrix(&grid);
        let gram = f.relatedness_gram(&grid);
        let expect = g.dot(&g.t());
        ensure(gram == expect, || "gram differs from G G^T".into())?;
        let norm2 = g.iter().map(|v| v * v).sum::<f64>();
        let low = min_eigenvalue(&gram);
        ensure(low >= -1e-10 * norm2, || format!("eigenvalue {low} with ||G||^2 = {norm2}"))
    })
}

pub fn weight_gram_identity() -> Result<(), String> {
    run((shape_strategy(), 1usize..=4, 1usize..=6, 1usize..=12, any::<u64>()), |(shape, rank, d, n, seed)| {
        let grid = TaskGrid::new(shape).unwrap();
        let mut r = rng(seed);
        let f = random_factors(&mut r, &grid, rank);
        let anchors = normal_matrix(&mut r, n, d);
        let tasks = (0..n).map(|_| r.random_range(0..grid.total())).collect();
        let coeffs = (0..n).map(|_| normal(&mut r)).collect();
        let dual = DualSharedFactor::new(anchors, tasks, coeffs, KernelSpec::Linear).unwrap();
        let l = dual.explicit_l(&f, &grid).unwrap();
        let w = dual.explicit_weights(&f, &grid).unwrap();
        let ltl = l.t().dot(&l);
        let u = f.mixing_matrix(&grid);
        let expect = u.dot(&ltl).dot(&u.t());
        let got = w.dot(&w.t());
        let scale = expect.iter().fold(1e-300f64, |a, v| a.max(v.abs()));
        let err = got.iter().zip(expect.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        ensure(err <= 1e-8 * scale, || format!("relative error {}", err / scale))
    })
}

pub fn mixing_vectors_are_multilinear() -> Result<(), String> {
    run((shape_strategy(), 1usize..=3, any::<u64>(), -3.0f64..3.0), |(shape, rank, seed, c)| {
        let grid = TaskGrid::new(shape).unwrap();
        let mut r = rng(seed);
        let f = random_factors(&mut r, &grid, rank);
        let row = r.random_range(0..grid.shape()[0]);
        let mut scaled = f.clone();
        scaled.factor_mut(0).row_mut(row).mapv_inplace(|v| v * c);
        for t in 0..grid.total() {
            let before = f.mixing_vector(t, &grid).unwrap();
            let after = scaled.mixing_vector(t, &grid).unwrap();
            let expect = if grid.delinearize(t).unwrap()[0] == row + 1 { &before * c } else { before };
            ensure(max_abs_diff(after.as_slice().unwrap(), expect.as_slice().unwrap()) <= 1e-12 * (1.0 + max_abs(expect.as_slice().unwrap())), || {
                format!("task {t}")
            })?;
        }
        Ok(())
    })
}

pub fn rescaling_two_modes_keeps_mixing() -> Result<(), String> {
    run((1usize..=4, 1usize..=4, 1usize..=3, any::<u64>(), 0.1f64..10.0), |(a, b, rank, seed, c)| {
        let grid = TaskGrid::new(vec![a, b]).unwrap();
        let f = random_factors(&mut rng(seed), &grid, rank);
        let mut g = f.clone();
        g.factor_mut(0).mapv_inplace(|v| v * c);
        g.factor_mut(1).mapv_inplace(|v| v / c);
        let (mf, mg) = (f.mixing_matrix(&grid), g.mixing_matrix(&grid));
        let err = max_abs_diff(mf.as_slice().unwrap(), mg.as_slice().unwrap());
        ensure(err <= 1e-12 * (1.0 + max_abs(mf.as_slice().unwrap())), || format!("difference {err}"))
    })
}

/// Random features split into tasks of the grid, plus the offsets.
fn random_cache(r: &mut rand_chacha::ChaCha8Rng, grid: &TaskGrid, d: usize, kernel: KernelSpec) -> GramCache {
    let sizes: Vec<usize> = (0..grid.total()).map(|_| r.random_range(1..=4)).collect();
    let mut offsets = vec![0];
    for s in &sizes {
        offsets.push(offsets.last().unwrap() + s);
    }
    let x = normal_matrix(r, *offsets.last().unwrap(), d);
    GramCache::build(kernel, x.view(), offsets).unwrap()
}

fn kernel_strategy() -> impl Strategy<Value = KernelSpec> {
    prop_oneof![Just(KernelSpec::Linear), (0.01f64..2.0).prop_map(|gamma| KernelSpec::Rbf { gamma })]
}

pub fn weighted_gram_is_psd() -> Result<(), String> {
    run((shape_strategy(), 1usize..=3, 1usize..=5, kernel_strategy(), any::<u64>(), any::<bool>()), |(shape, rank, d, kernel, seed, labelled)| {
        let grid = TaskGrid::new(shape).unwrap();
        let mut r = rng(seed);
        let f = random_factors(&mut r, &grid, rank);
        let cache = random_cache(&mut r, &grid, d, kernel);
        let y: Vec<f64> = (0..cache.len()).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let q = weighted_gram_q(&cache, &f, &grid, labelled.then_some(y.as_slice())).unwrap();
        let m = q.nrows() as f64;
        let trace: f64 = q.diag().sum();
        let low = min_eigenvalue(&q);
        ensure(low >= -1e-8 * trace / m, || format!("eigenvalue {low}, trace {trace}"))
    })
}

pub fn lphi_dual_matches_explicit() -> Result<(), String> {
    run((shape_strategy(), 1usize..=4, 1usize..=6, 1usize..=10, any::<u64>()), |(shape, rank, d, n, seed)| {
        let grid = TaskGrid::new(shape).unwrap();
        let mut r = rng(seed);
        let f = random_factors(&mut r, &grid, rank);
        let anchors = normal_matrix(&mut r, n, d);
        let tasks = (0..n).map(|_| r.random_range(0..grid.total())).collect();
        let coeffs = (0..n).map(|_| normal(&mut r)).collect();
        let dual = DualSharedFactor::new(anchors, tasks, coeffs, KernelSpec::Linear).unwrap();
        let l = dual.explicit_l(&f, &grid).unwrap();
        let x: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
        let got = lphi(&dual, &f, &grid, &x).unwrap();
        let expect = l.t().dot(&Array1::from(x));
        let scale = max_abs(expect.as_slice().unwrap()).max(1e-300);
        let err = max_abs_diff(got.as_slice().unwrap(), expect.as_slice().unwrap());
        ensure(err <= 1e-10 * scale.max(1.0), || format!("error {err} at scale {scale}"))
    })
}

pub fn weighted_gram_with_unit_mixing() -> Result<(), String> {
    run((shape_strategy(), 1usize..=5, kernel_strategy(), any::<u64>()), |(shape, d, kernel, seed)| {
        let grid = TaskGrid::new(shape).unwrap();
        let mut r = rng(seed);
        let cache = random_cache(&mut r, &grid, d, kernel);
        let y: Vec<f64> = (0..cache.len()).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let ones = CpFactors::ones(&grid, 1).unwrap();
        let q = weighted_gram_q(&cache, &ones, &grid, Some(&y)).unwrap();
        let k = cache.matrix();
        for i in 0..q.nrows() {
            for j in 0..q.ncols() {
                let expect = y[i] * y[j] * k[[i, j]];
                ensure((q[[i, j]] - expect).abs() <= 1e-15 * (1.0 + expect.abs()), || format!("entry ({i}, {j})"))?;
            }
        }
        Ok(())
    })
}

pub fn qp_matches_projected_gradient() -> Result<(), String> {
    run((2usize..=50, any::<u64>()), |(n, seed)| {
        let p = random_qp(&mut rng(seed), n);
        let sol = solve_qp(&p, &QpOptions::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let (_, oracle) = pg_oracle(&p, 1e-10, 500_000);
        let obj = p.objective(&sol.x);
        ensure(obj >= oracle - 1e-6 * (1.0 + oracle.abs()), || format!("objective {obj} vs oracle {oracle}"))
    })
}

pub fn qp_equalities_hold() -> Result<(), String> {
    run((2usize..=50, any::<u64>()), |(n, seed)| {
        let p = random_qp(&mut rng(seed), n);
        let sol = solve_qp(&p, &QpOptions::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let worst = max_abs(&p.group_sums(&sol.x));
        ensure(worst <= 1e-8, || format!("group sum {worst}"))?;
        for i in 0..n {
            ensure(sol.x[i] >= p.lower[i] && sol.x[i] <= p.upper[i], || format!("x[{i}] outside its box"))?;
        }
        Ok(())
    })
}

pub fn qp_objective_is_monotone() -> Result<(), String> {
    run((2usize..=50, any::<u64>()), |(n, seed)| {
        let p = random_qp(&mut rng(seed), n);
        let opts = QpOptions {
            record_objective: true,
            ..QpOptions::default()
        };
        let sol = solve_qp(&p, &opts).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for w in sol.objective_trace.windows(2) {
            ensure(w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()), || format!("objective fell from {} to {}", w[0], w[1]))?;
        }
        Ok(())
    })
}

pub fn qp_is_deterministic() -> Result<(), String> {
    run((2usize..=50, any::<u64>()), |(n, seed)| {
        let p = random_qp(&mut rng(seed), n);
        let a = solve_qp(&p, &QpOptions::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let b = solve_qp(&p, &QpOptions::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        ensure(a == b, || "two solves differ".into())
    })
}

pub fn saddle_block_equations() -> Result<(), String> {
    run((1usize..=200, any::<u64>()), |(k, seed)| {
        let sys = random_saddle(&mut rng(seed), k);
        let sol = solve_saddle(&sys, PdSolver::Cholesky).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let scale = 1.0 + max_abs(&sys.d1).max(max_abs(&sys.d2));
        let res = sys.residual(&sol.x1, &sol.x2);
        ensure(res <= 1e-8 * scale && sol.residual == res, || format!("residual {res}, reported {}", sol.residual))
    })
}

pub fn saddle_matches_dense_solve() -> Result<(), String> {
    run((1usize..=200, any::<u64>()), |(k, seed)| {
        let sys = random_saddle(&mut rng(seed), k);
        let sol = solve_saddle(&sys, PdSolver::Cholesky).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let (x1, x2) = dense_saddle(&sys);
        let mut ours = sol.x1.clone();
        ours.extend_from_slice(&sol.x2);
        let mut dense = x1;
        dense.extend_from_slice(&x2);
        let rel = max_abs_diff(&ours, &dense) / max_abs(&dense).max(1e-300);
        ensure(rel <= 1e-8, || format!("relative difference {rel}"))
    })
}

pub fn cholesky_matches_lu() -> Result<(), String> {
    run((1usize..=200, any::<u64>()), |(k, seed)| {
        let sys = random_saddle(&mut rng(seed), k);
        let a = solve_saddle(&sys, PdSolver::Cholesky).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let b = solve_saddle(&sys, PdSolver::Lu).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let scale = max_abs(&b.x1).max(max_abs(&b.x2)).max(1e-300);
        let err = max_abs_diff(&a.x1, &b.x1).max(max_abs_diff(&a.x2, &b.x2)) / scale;
        ensure(err <= 1e-9, || format!("relative difference {err}"))
    })
}

pub fn l_step_equalities_hold() -> Result<(), String> {
    run((variant_strategy(), prop::collection::vec(1usize..=3, 1..=2), 1usize..=3, any::<u64>()), |(variant, shape, rank, seed)| {
        let data = small_dataset(seed, shape, 4, 6, variant.kind());
        let cfg = small_config(variant, seed, rank);
        let trainer = Trainer::new(&data, cfg).unwrap();
        let f = CpFactors::init(data.grid(), rank, seed).unwrap();
        let l = trainer.solve_l(&f, None).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let offsets = &trainer.stacked().offsets;
        let scale = max_abs(&l.coeffs).max(1.0);
        for t in 0..data.num_tasks() {
            let s: f64 = l.coeffs[offsets[t]..offsets[t + 1]].iter().sum();
            ensure(s.abs() <= 1e-8 * scale, || format!("task {t} sums to {s}"))?;
        }
        Ok(())
    })
}

pub fn factor_row_is_stationary_point() -> Result<(), String> {
    run((variant_strategy(), prop::collection::vec(1usize..=3, 1..=3), 1usize..=3, any::<u64>()), |(variant, shape, rank, seed)| {
        factor_row_case(variant, shape, rank, seed)
    })
}

pub fn factor_row_case(variant: Variant, shape: Vec<usize>, rank: usize, seed: u64) -> Result<(), TestCaseError> {
    let data = small_dataset(seed, shape, 4, 6, variant.kind());
    let grid = data.grid().clone();
    let trainer = Trainer::new(&data, small_config(variant, seed, rank)).unwrap();
    let f = CpFactors::init(&grid, rank, seed ^ 1).unwrap();
    let l = trainer.solve_l(&f, None).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let lphi_train = trainer.lphi_train(&f, &l);
    let st = trainer.stacked();
    let dual = DualSharedFactor::new(st.features.clone(), st.sample_tasks.clone(), l.coeffs.clone(), KernelSpec::Linear).unwrap();
    let big_l = dual.explicit_l(&f, &grid).unwrap();
    let mut r = rng(seed);
    let mode = r.random_range(0..grid.modes());
    let slice = r.random_range(0..grid.shape()[mode]);
    let sol = trainer
        .solve_slice(&f, lphi_train.view(), mode, slice, None)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    // u = sum_i coeff_i z_i with z rebuilt from the explicit L
    let mut expect = Array1::<f64>::zeros(rank);
    // terms can cancel, so rounding is measured against their total size
    let mut magnitude = 0.0f64;
    let mut p = 0;
    for &t in &sol.tasks {
        let multi = grid.delinearize(t).unwrap();
        for i in st.offsets[t]..st.offsets[t + 1] {
            let mut z = big_l.t().dot(&st.features.row(i));
            for (n, &idx) in multi.iter().enumerate() {
                if n != mode {
                    z *= &f.factor(n).row(idx - 1);
                }
            }
            expect.scaled_add(sol.coeffs[p], &z);
            magnitude += sol.coeffs[p].abs() * max_abs(z.as_slice().unwrap());
            p += 1;
        }
    }
    let scale = magnitude.max(1e-12);
    let err = max_abs_diff(sol.row.as_slice().unwrap(), expect.as_slice().unwrap());
    ensure(err <= 1e-8 * scale, || format!("relative error {}", err / scale))
}

pub fn training_is_deterministic() -> Result<(), String> {
    run((variant_strategy(), any::<u64>()), |(variant, seed)| {
        let data = small_dataset(seed, vec![2, 2], 4, 6, variant.kind());
        let cfg = small_config(variant, seed, 2);
        let a = train(&data, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let b = train(&data, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        ensure(a.model == b.model, || "models differ".into())
    })
}

pub fn dual_and_primal_predictions_agree() -> Result<(), String> {
    run((variant_strategy(), any::<u64>()), |(variant, seed)| {
        let data = small_dataset(seed, vec![2, 3], 5, 6, variant.kind());
        let model = train(&data, &small_config(variant, seed, 2)).map_err(|e| TestCaseError::fail(e.to_string()))?.model;
        let w = model.explicit_weights().unwrap();
        let mut r = rng(seed);
        for t in 0..data.num_tasks() {
            let x: Vec<f64> = (0..5).map(|_| normal(&mut r)).collect();
            let dual = model.decision_value(&x, t).unwrap();
            let primal = model.decision_value_primal(&w, &x, t).unwrap();
            ensure((dual - primal).abs() <= 1e-10 * (1.0 + dual.abs()), || format!("task {t}: {dual} vs {primal}"))?;
        }
        Ok(())
    })
}

pub fn model_json_round_trip() -> Result<(), String> {
    run((variant_strategy(), kernel_strategy(), any::<bool>(), any::<u64>()), |(variant, kernel, baseline, seed)| {
        let data = small_dataset(seed, vec![3], 3, 5, variant.kind());
        let cfg = TrainConfig {
            kernel,
            ..small_config(variant, seed, 1)
        };
        let model = if baseline {
            AnyModel::Baseline(train_independent(&data, &cfg).unwrap().0)
        } else {
            AnyModel::Tensorized(train(&data, &cfg).unwrap().model)
        };
        let back = AnyModel::from_json(&model.to_json().unwrap()).unwrap();
        ensure(back == model, || "model changed".into())?;
        let (a, b) = (model.predict_dataset(&data).unwrap().concat(), back.predict_dataset(&data).unwrap().concat());
        ensure(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), || "predictions changed".into())
    })
}

pub fn snr_round_trip() -> Result<(), String> {
    run((prop::collection::vec(1usize..=3, 1..=2), 1usize..=8, 60usize..=90, -5.0f64..40.0, any::<u64>()), |(shape, d, m, snr, seed)| {
        let cfg = SynthConfig {
            shape,
            d,
            rank: 2,
            m_train: m,
            m_test: 1,
            ..SynthConfig::standard(ProblemKind::Regression, snr, seed)
        };
        let data = synth_generate(&cfg).unwrap();
        for (t, block) in data.train.tasks().iter().enumerate() {
            let clean: Vec<f64> = block.features.rows().into_iter().map(|x| data.truth.response(x.as_slice().unwrap(), t)).collect();
            let noise: Vec<f64> = block.labels.iter().zip(&clean).map(|(y, c)| y - c).collect();
            let measured = 20.0 * (sample_var(&clean) / sample_var(&noise)).log10();
            ensure((measured - snr).abs() <= 0.5, || format!("task {t}: {measured:.3} dB for {snr:.3}"))?;
        }
        Ok(())
    })
}

fn sample_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

pub fn folds_partition_tasks() -> Result<(), String> {
    run((prop::collection::vec(1usize..=30, 1..=6), 2usize..=10, any::<u64>()), |(sizes, k, seed)| {
        let grid = TaskGrid::new(vec![sizes.len()]).unwrap();
        let blocks = sizes
            .iter()
            .map(|&m| TaskBlock {
                features: Array2::zeros((m, 1)),
                labels: vec![0.0; m],
            })
            .collect();
        let ds = MultiTaskDataset::new(grid, ProblemKind::Regression, blocks).unwrap();
        let folds = TaskFolds::new(&ds, k, seed).unwrap();
        let mut seen: Vec<Vec<usize>> = sizes.iter().map(|&m| vec![0; m]).collect();
        for f in 0..k {
            let (tr, va) = folds.split(f);
            for t in 0..sizes.len() {
                let mut all: Vec<usize> = tr[t].iter().chain(&va[t]).copied().collect();
                all.sort_unstable();
                ensure(all == (0..sizes[t]).collect::<Vec<_>>(), || format!("fold {f} task {t} is not a partition"))?;
                for &i in &va[t] {
                    seen[t][i] += 1;
                }
            }
        }
        for (t, s) in seen.iter().enumerate() {
            if sizes[t] >= 2 {
                ensure(s.iter().all(|&c| c == 1), || format!("task {t}: a sample is validated {s:?} times"))?;
                let counts: Vec<usize> = (0..k).map(|f| folds.split(f).1[t].len()).collect();
                let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
                ensure(spread <= 1, || format!("task {t} fold sizes {counts:?}"))?;
            }
        }
        Ok(())
    })
}

fn odd_float() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        Just(0.1),
        Just(1e-17),
        Just(-0.0),
        Just(f64::MAX),
        Just(f64::MIN_POSITIVE),
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
    ]
}

pub fn csv_round_trip() -> Result<(), String> {
    let strategy = (prop::collection::vec(1usize..=3, 1..=3), 1usize..=4, any::<bool>(), any::<u64>())
        .prop_flat_map(|(shape, d, classification, seed)| {
            let tasks: usize = shape.iter().product();
            (
                Just(shape),
                Just(d),
                Just(classification),
                prop::collection::vec(prop::collection::vec(odd_float(), d + 1), tasks * 3),
                Just(seed),
            )
        });
    run(strategy, |(shape, d, classification, values, seed)| {
        let grid = TaskGrid::new(shape.clone()).unwrap();
        let mut r = rng(seed);
        let mut rows = values.into_iter();
        let blocks = (0..grid.total())
            .map(|_| {
                let m = r.random_range(1..=3);
                let mut features = Array2::zeros((m, d));
                let mut labels = Vec::new();
                for i in 0..m {
                    let v = rows.next().unwrap();
                    labels.push(if classification { v[0].signum() } else { v[0] });
                    for j in 0..d {
                        features[[i, j]] = v[j + 1];
                    }
                }
                TaskBlock { features, labels }
            })
            .collect();
        let kind = if classification { ProblemKind::Classification } else { ProblemKind::Regression };
        let ds = MultiTaskDataset::new(grid, kind, blocks).unwrap();
        let back = parse_csv(&to_csv(&ds), &CsvSchema { kind, shape: Some(shape) }).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let bits = |ds: &MultiTaskDataset| -> Vec<u64> {
            ds.tasks().iter().flat_map(|b| b.labels.iter().chain(b.features.iter()).map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
        };
        ensure(back == ds && bits(&back) == bits(&ds), || "dataset changed".into())
    })
}

pub fn metric_invariances() -> Result<(), String> {
    run((prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40), any::<u64>(), 0.1f64..10.0, -5.0f64..5.0), |(pairs, seed, a, b)| {
        let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.shuffle(&mut rng(seed));
        let (yp, pp): (Vec<f64>, Vec<f64>) = order.iter().map(|&i| (y[i], p[i])).unzip();
        let close = |u: f64, v: f64| (u - v).abs() <= 1e-10 * (1.0 + u.abs());
        ensure(close(q2(&y, &p).unwrap(), q2(&yp, &pp).unwrap()), || "Q2 changed under permutation".into())?;
        if let Ok(c) = correlation(&y, &p) {
            let shifted: Vec<f64> = p.iter().map(|v| a * v + b).collect();
            let c2 = correlation(&y, &shifted).unwrap();
            ensure(close(c, c2), || format!("correlation {c} vs {c2}"))?;
        }
        let (ys, ps): (Vec<f64>, Vec<f64>) = y.iter().zip(&p).map(|(u, v)| (a * u, a * v)).unzip();
        let (r1, r2) = (rmse(&y, &p).unwrap(), rmse(&ys, &ps).unwrap());
        ensure(close(a * r1, r2), || format!("RMSE {r1} scaled by {a} gave {r2}"))
    })
}

pub fn pooled_rmse_is_weighted_mean() -> Result<(), String> {
    let task = prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..15);
    run(prop::collection::vec(task, 1..8), |tasks| {
        let truth: Vec<Vec<f64>> = tasks.iter().map(|t| t.iter().map(|p| p.0).collect()).collect();
        let pred: Vec<Vec<f64>> = tasks.iter().map(|t| t.iter().map(|p| p.1).collect()).collect();
        let n: usize = truth.iter().map(Vec::len).sum();
        let weighted: f64 = truth
            .iter()
            .zip(&pred)
            .map(|(y, p)| rmse(y, p).unwrap().powi(2) * y.len() as f64)
            .sum::<f64>()
            / n as f64;
        let rep = evaluate(&truth, &pred, false).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let Report::Regression(pooled) = rep.pooled else {
            return Err(TestCaseError::fail("expected regression"));
        };
        ensure((pooled.rmse.powi(2) - weighted).abs() <= 1e-10 * (1.0 + weighted), || format!("{} vs {weighted}", pooled.rmse.powi(2)))
    })
}

pub fn frozen_rank_one_is_independent_baseline() -> Result<(), String> {
    run((variant_strategy(), kernel_strategy(), any::<u64>()), |(variant, kernel, seed)| {
        let data = small_dataset(seed, vec![1], 4, 12, variant.kind());
        let cfg = TrainConfig {
            kernel,
            rank: 1,
            update_factors: false,
            max_outer_iters: 0,
            ..small_config(variant, seed, 1)
        };
        let tensor = train_from(&data, &cfg, CpFactors::ones(data.grid(), 1).unwrap())
            .map_err(|e| TestCaseError::fail(e.to_string()))?
            .model;
        let (base, _) = train_independent(&data, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut r = rng(seed);
        for _ in 0..5 {
            let x: Vec<f64> = (0..4).map(|_| normal(&mut r)).collect();
            let (a, b) = (tensor.decision_value(&x, 0).unwrap(), base.decision_value(&x, 0).unwrap());
            ensure((a - b).abs() <= 1e-8 * (1.0 + a.abs()), || format!("{a} vs {b}"))?;
        }
        Ok(())
    })
}
