//! Files, configuration and experiment plumbing around `refdet-core`:
//! TOML experiment configs, JSONL/PNG dataset manifests, checkpoints, run
//! directories, training and evaluation loops, the ablation harness and
//! detection rendering.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod profile;
pub mod render;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use pipeline::Model;
