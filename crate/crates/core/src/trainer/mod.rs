//! Alternating domain and task training with strict gradient routing, on
//! the vendor side (labelled source) and the client side (unlabelled target).

mod eval;
mod log;
mod losses;
mod optim;
mod pseudo;
mod run;
mod schedule;
mod steps;

use crate::forge::ForgeError;
use crate::vit::ModelError;

pub use eval::{accuracy, extract, Extracted};
pub use log::{EpochRecord, MetricsLog, Phase, CSV_HEADER};
pub use losses::{div_loss, im_loss};
pub use optim::{sgd_step, OptimState, Warmup};
pub use pseudo::{assign_pseudo_labels, compute_centroids, Centroids, PseudoLabelState};
pub use run::{adapt_epoch_client, run_client, run_vendor, ClientEpochStats, RunContext};
pub use schedule::{Routing, TrainFlags, TrainSchedule};
pub(crate) use steps::argmax;
pub use steps::{client_task_step, ClientStepStats, domain_step, task_step_vendor, LabeledBatch, StepStats};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("sample {0} has no class label")]
    MissingClassLabels(usize),
    #[error("centroid for class {0} is degenerate and has no usable fallback")]
    DegenerateCentroid(usize),
    #[error("feature row {0} has zero norm")]
    ZeroNormFeature(usize),
    #[error("pseudo-labels are {age} epochs old, refresh_every is {refresh_every}")]
    StalePseudoLabels { age: usize, refresh_every: usize },
    #[error("round {round}: domain accuracy {accuracy:.3} below target after {epochs} epochs")]
    DomainAccuracyUnreachable { round: usize, accuracy: f64, epochs: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<dsit_tensor::TensorError> for TrainError {
    fn from(e: dsit_tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}
