//! Augmented domain datasets, task-destructive patch shuffling and the
//! synthetic multi-domain benchmark.

mod augment;
mod dri;
mod io;
mod synthetic;

use dsit_tensor::Tensor;

pub use augment::{apply_augmentation, default_specs, AugmentationKind, AugmentationSpec};
pub use dri::{
    build_dri_dataset, dri_sample, grid_permutation, shuffle_patches, DriBatch, DriSample,
    NegativeControl,
};
pub(crate) use dri::{dri_subset, task_labels};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use synthetic::{generate_synthetic, SyntheticBenchmark, SyntheticParams};

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("unknown augmentation {0:?}")]
    UnknownAugmentation(String),
    #[error("augmentation {kind} expects {expected} parameters, got {got}")]
    BadAugmentationParams {
        kind: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("image side {size} not divisible by grid {grid}")]
    IndivisibleGrid { size: usize, grid: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least 2 augmentation domains, got {0}")]
    TooFewDomains(usize),
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("image shape {0:?} is not [C, H, W] with square H = W")]
    BadImage(Vec<usize>),
    #[error("shuffled inputs carry no task labels unless the negative control is enabled")]
    GuardRefused,
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Image in `[0, 1]` with optional class and domain labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub class_label: Option<usize>,
    pub domain_label: Option<usize>,
}

impl LabeledImage {
    pub fn new(pixels: Tensor, class_label: Option<usize>, domain_label: Option<usize>) -> Result<Self, ForgeError> {
        let s = pixels.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(ForgeError::BadImage(s.to_vec()));
        }
        Ok(Self {
            pixels,
            class_label,
            domain_label,
        })
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Stacks images into a `[B×C×H×W]` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a LabeledImage>) -> Tensor {
    let refs: Vec<&Tensor> = images.into_iter().map(|i| &i.pixels).collect();
    Tensor::stack(&refs).expect("images share a shape")
}

/// Derives an independent per-sample seed so results do not depend on
/// processing order.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = (base ^ index).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn clamp_unit(data: &mut [f64]) {
    for v in data {
        *v = v.clamp(0.0, 1.0);
    }
}
