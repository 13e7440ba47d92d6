//! Configuration, experiment orchestration and report emission.

mod config;
mod report;
mod run;
mod selftest;

use std::path::PathBuf;

use crate::forge::ForgeError;
use crate::probes::ProbeError;
use crate::trainer::TrainError;
use crate::vit::ModelError;

pub use config::{parse_config, parse_config_str, DataConfig, ExperimentConfig, Mode, ProbeSettings, SweepSettings};
pub use report::{emit_report, RunReport, ReportPaths};
pub use selftest::{selftest, SelfCheck};
pub use run::{dri_as_augmentation_mode, load_domains, run_experiment, AblationRow};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    InvariantViolation(String),
    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("output directory {} is not empty; pass --force to overwrite", .0.display())]
    OutputExists(PathBuf),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
