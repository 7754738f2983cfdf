//! Experiment orchestration: config parsing with named presets,
//! checkpointing, and plot-ready CSV/JSON artifacts.
//!
//! The `notbary` binary drives this module:
//!
//! ```text
//! notbary run <config.json>... [--out DIR] [--seed N] [--jobs J]
//! notbary eval <checkpoint-stem> <config.json>
//! notbary oracle gaussian <instance.json>
//! ```
//!
//! Configs are JSON with a mandatory `experiment` tag (`twister`,
//! `gaussian-benchmark`, or `dirac-sanity`); all other keys are optional and
//! default to the preset's values. Unknown keys are rejected by name. The
//! fully resolved config is echoed to `effective_config.json` in the output
//! directory and hashed into checkpoints, which refuse to load under a
//! different config.

mod checkpoint;
mod config;
mod runner;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use config::{
    parse_config, parse_config_str, CostConfig, CostFamily, EvalConfig, ExperimentConfig,
    ExperimentKind, TrainParams, TwisterParams,
};
pub use runner::{
    build_problem, compute_metrics, gaussian_oracle_report, run_experiment, write_atomic,
    RunArtifacts,
};
