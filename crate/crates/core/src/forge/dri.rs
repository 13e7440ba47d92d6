use dsit_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{apply_augmentation, sample_seed, AugmentationSpec, ForgeError, LabeledImage};

/// Uniform permutation of the `grid²` cells drawn from `seed`.
pub fn grid_permutation(grid: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..grid * grid).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

/// Cuts the image into `grid×grid` equal cells and rearranges them so that
/// output cell `i` holds input cell `perm[i]`. The class label is dropped.
pub fn shuffle_patches(img: &LabeledImage, grid: usize, rng_seed: u64) -> Result<LabeledImage, ForgeError> {
    let n = img.size();
    if grid == 0 || n % grid != 0 {
        return Err(ForgeError::IndivisibleGrid { size: n, grid });
    }
    let perm = grid_permutation(grid, rng_seed);
    let cell = n / grid;
    let src = img.pixels.data();
    let mut out = vec![0.0; src.len()];
    for (plane_out, plane_in) in out.chunks_exact_mut(n * n).zip(src.chunks_exact(n * n)) {
        for (dst, &from) in perm.iter().enumerate() {
            let (dy, dx) = (dst / grid * cell, dst % grid * cell);
            let (sy, sx) = (from / grid * cell, from % grid * cell);
            for y in 0..cell {
                let d = (dy + y) * n + dx;
                let s = (sy + y) * n + sx;
                plane_out[d..d + cell].copy_from_slice(&plane_in[s..s + cell]);
            }
        }
    }
    Ok(LabeledImage {
        pixels: Tensor::new(img.pixels.shape().to_vec(), out).expect("same shape"),
        class_label: None,
        domain_label: img.domain_label,
    })
}

/// Explicit opt-in for feeding shuffled inputs to the task loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NegativeControl {
    enabled: bool,
}

impl NegativeControl {
    pub fn new(enabled: bool) -> Self {
        Self { enabled }
    }

    pub fn enabled(self) -> bool {
        self.enabled
    }
}

/// An augmented, shuffled input. Only its domain label is public.
#[derive(Debug, Clone, PartialEq)]
pub struct DriSample {
    pub pixels: Tensor,
    pub domain_label: usize,
    origin_class: Option<usize>,
}

impl DriSample {
    /// Class of the source image before shuffling; refused unless the
    /// negative control is enabled.
    pub fn task_label(&self, guard: NegativeControl) -> Result<usize, ForgeError> {
        match (guard.enabled, self.origin_class) {
            (true, Some(c)) => Ok(c),
            _ => Err(ForgeError::GuardRefused),
        }
    }
}

/// A batch of shuffled inputs with domain labels only.
#[derive(Debug, Clone, PartialEq)]
pub struct DriBatch {
    pub inputs: Tensor,
    pub domain_labels: Vec<usize>,
    pub grid: usize,
}

impl DriBatch {
    pub fn new<'a>(samples: impl IntoIterator<Item = &'a DriSample>, grid: usize) -> Result<Self, ForgeError> {
        let samples: Vec<&DriSample> = samples.into_iter().collect();
        if samples.is_empty() {
            return Err(ForgeError::EmptyDataset);
        }
        let pixels: Vec<&Tensor> = samples.iter().map(|s| &s.pixels).collect();
        Ok(Self {
            inputs: Tensor::stack(&pixels).expect("samples share a shape"),
            domain_labels: samples.iter().map(|s| s.domain_label).collect(),
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.domain_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain_labels.is_empty()
    }
}

fn check_inputs(data: &[LabeledImage], specs: &[AugmentationSpec], grid: usize) -> Result<(), ForgeError> {
    if data.is_empty() {
        return Err(ForgeError::EmptyDataset);
    }
    if specs.len() < 2 {
        return Err(ForgeError::TooFewDomains(specs.len()));
    }
    let n = data[0].size();
    if grid == 0 || n % grid != 0 {
        return Err(ForgeError::IndivisibleGrid { size: n, grid });
    }
    specs.iter().try_for_each(AugmentationSpec::validate)
}

/// Sample `index = i·N_a + j` of the DRI dataset: image `i` under spec `j`.
pub fn dri_sample(
    data: &[LabeledImage],
    specs: &[AugmentationSpec],
    grid: usize,
    seed: u64,
    index: usize,
) -> Result<DriSample, ForgeError> {
    check_inputs(data, specs, grid)?;
    let (i, j) = (index / specs.len(), index % specs.len());
    let img = data.get(i).ok_or(ForgeError::EmptyDataset)?;
    make_sample(img, &specs[j], grid, sample_seed(seed, index as u64))
}

fn make_sample(img: &LabeledImage, spec: &AugmentationSpec, grid: usize, seed: u64) -> Result<DriSample, ForgeError> {
    let augmented = apply_augmentation(img, spec, sample_seed(seed, 1))?;
    let shuffled = shuffle_patches(&augmented, grid, sample_seed(seed, 2))?;
    Ok(DriSample {
        pixels: shuffled.pixels,
        domain_label: spec.index,
        origin_class: img.class_label,
    })
}

/// Every (image, augmentation) pair, augmented and then shuffled, in
/// image-major order. Output length is `|data|·|specs|`.
pub fn build_dri_dataset(
    data: &[LabeledImage],
    specs: &[AugmentationSpec],
    grid: usize,
    seed: u64,
) -> Result<Vec<DriSample>, ForgeError> {
    check_inputs(data, specs, grid)?;
    let na = specs.len();
    (0..data.len() * na)
        .into_par_iter()
        .map(|index| make_sample(&data[index / na], &specs[index % na], grid, sample_seed(seed, index as u64)))
        .collect()
}

/// Builds the samples at `indices` only; used to draw a fresh subset each epoch.
pub(crate) fn dri_subset(
    data: &[LabeledImage],
    specs: &[AugmentationSpec],
    grid: usize,
    seed: u64,
    indices: &[usize],
) -> Result<Vec<DriSample>, ForgeError> {
    check_inputs(data, specs, grid)?;
    let na = specs.len();
    indices
        .par_iter()
        .map(|&index| make_sample(&data[index / na], &specs[index % na], grid, sample_seed(seed, index as u64)))
        .collect()
}

/// Task-labelled DRI for the negative control. Fails with `GuardRefused`
/// unless the guard is enabled.
pub(crate) fn task_labels(samples: &[&DriSample], guard: NegativeControl) -> Result<Vec<usize>, ForgeError> {
    samples.iter().map(|s| s.task_label(guard)).collect()
}
