use crate::forge::{build_dri_dataset, stack_images, AugmentationSpec, LabeledImage};
use crate::vit::VitModel;

use super::{kmeans, nmi, ProbeError};

const RESTARTS: usize = 20;
const BATCH: usize = 64;

/// Clustering agreement of domain-token features at one shuffle grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub grid: usize,
    pub domain_nmi: f64,
    pub class_nmi: f64,
}

/// For each grid, builds the augmented and shuffled dataset, extracts
/// domain-token features and clusters them into as many groups as there
/// are augmentation domains and as there are classes.
pub fn grid_size_sweep(
    model: &VitModel,
    data: &[LabeledImage],
    specs: &[AugmentationSpec],
    grids: &[usize],
    seed: u64,
) -> Result<Vec<SweepPoint>, ProbeError> {
    let class_of: Vec<usize> = data
        .iter()
        .enumerate()
        .map(|(i, img)| {
            img.class_label
                .ok_or_else(|| ProbeError::InvalidArgument(format!("image {i} has no class label")))
        })
        .collect::<Result<_, _>>()?;
    let num_classes = class_of.iter().max().map_or(0, |m| m + 1);
    let na = specs.len();
    let class_labels: Vec<usize> = (0..data.len() * na).map(|idx| class_of[idx / na]).collect();

    grids
        .iter()
        .map(|&grid| {
            let samples = build_dri_dataset(data, specs, grid, seed)?;
            let domain_labels: Vec<usize> = samples.iter().map(|s| s.domain_label).collect();
            let mut features = Vec::new();
            for chunk in samples.chunks(BATCH) {
                let images: Vec<LabeledImage> = chunk
                    .iter()
                    .map(|s| LabeledImage {
                        pixels: s.pixels.clone(),
                        class_label: None,
                        domain_label: Some(s.domain_label),
                    })
                    .collect();
                let out = model.infer(&stack_images(&images)).map_err(crate::trainer::TrainError::from)?;
                features.extend_from_slice(out.z_d.data());
            }
            let dim = model.config().embed_dim;
            let domains = kmeans(&features, dim, na, RESTARTS, seed)?;
            let classes = kmeans(&features, dim, num_classes, RESTARTS, seed)?;
            Ok(SweepPoint {
                grid,
                domain_nmi: nmi(&domains.assignments, &domain_labels)?,
                class_nmi: nmi(&classes.assignments, &class_labels)?,
            })
        })
        .collect()
}
