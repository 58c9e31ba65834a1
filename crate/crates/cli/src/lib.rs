//! Batch experiments on global error amplification: configuration,
//! experiment drivers and CSV output behind the `ivpcond` binary.

// `!(a > b)` comparisons reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;
pub mod output;

pub use config::{ExperimentConfig, Model, Settings};
pub use experiment::{run_cases, run_condition, run_scan, Row, Status};
