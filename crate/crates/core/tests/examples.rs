//! Every example must run to completion.

mod quickstart {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/quickstart.rs"));
}

#[test]
fn quickstart_runs() {
    quickstart::run_example().expect("quickstart example failed");
}

mod classification {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/classification.rs"));
}

#[test]
fn classification_runs() {
    classification::run_example().expect("classification example failed");
}

mod qp_solver {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/qp_solver.rs"));
}

#[test]
fn qp_solver_runs() {
    qp_solver::run_example().expect("qp_solver example failed");
}

mod saddle_system {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/saddle_system.rs"));
}

#[test]
fn saddle_system_runs() {
    saddle_system::run_example().expect("saddle_system example failed");
}

mod cross_validation {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/cross_validation.rs"));
}

#[test]
fn cross_validation_runs() {
    cross_validation::run_example().expect("cross_validation example failed");
}

mod task_relatedness {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/task_relatedness.rs"));
}

#[test]
fn task_relatedness_runs() {
    task_relatedness::run_example().expect("task_relatedness example failed");
}

mod model_io {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/model_io.rs"));
}

#[test]
fn model_io_runs() {
    model_io::run_example().expect("model_io example failed");
}

mod baselines {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/baselines.rs"));
}

#[test]
fn baselines_runs() {
    baselines::run_example().expect("baselines example failed");
}

mod early_stop {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/early_stop.rs"));
}

#[test]
fn early_stop_runs() {
    early_stop::run_example().expect("early_stop example failed");
}
