//! Evaluation of trained models: pairwise similarity metrics and the
//! disentanglement criterion, a linear domain probe, the proxy A-distance,
//! and clustering NMI under patch shuffling.

mod cluster;
mod dump;
mod gamma;
mod probe;
mod sweep;

use crate::forge::ForgeError;
use crate::trainer::TrainError;

pub use cluster::{kmeans, nmi, KMeans};
pub use dump::{read_dump, write_dump, load_dump, save_dump, FeatureDump};
pub use gamma::{check_criterion, gamma_metrics, Gamma, GammaReport, DEFAULT_TAU};
pub use probe::{a_distance, train_domain_probe, DomainProbe, ProbeConfig};
pub use sweep::{grid_size_sweep, SweepPoint};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("no valid pairs for {0}")]
    NoValidPairs(&'static str),
    #[error("domain probe needs at least two domains")]
    SingleDomain,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("feature row {0} has zero norm")]
    ZeroNormFeature(usize),
    #[error("invalid feature dump: {0}")]
    InvalidDump(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
