//! Experiment orchestration for the crisisvit toolkit: declarative
//! experiment files, fingerprinted artifact trees with resumption, and
//! combined comparison reports across experiments.

pub mod experiment;
pub mod reference;

pub use experiment::{
    collect_scorecards, dedup_scorecards, matrix_significance, run_experiment, ExperimentFile,
    RunOutcome, Violation, CODE_VERSION,
};
