use dsit_tensor::Tensor;

use crate::forge::{stack_images, LabeledImage};
use crate::vit::VitModel;

use super::steps::argmax;
use super::TrainError;

/// Frozen features and logits for a whole dataset, row-aligned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub z_c: Tensor,
    pub z_d: Tensor,
    pub task_logits: Tensor,
    pub domain_logits: Tensor,
}

/// Runs inference over `images` in chunks of `batch_size`.
pub fn extract(model: &VitModel, images: &[LabeledImage], batch_size: usize) -> Result<Extracted, TrainError> {
    if images.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut parts: [Vec<f64>; 4] = Default::default();
    for chunk in images.chunks(batch_size.max(1)) {
        let out = model.infer(&stack_images(chunk))?;
        for (dst, src) in parts.iter_mut().zip([&out.z_c, &out.z_d, &out.task_logits, &out.domain_logits]) {
            dst.extend_from_slice(src.data());
        }
    }
    let cfg = model.config();
    let n = images.len();
    let [z_c, z_d, task, domain] = parts;
    Ok(Extracted {
        z_c: Tensor::new(vec![n, cfg.embed_dim], z_c)?,
        z_d: Tensor::new(vec![n, cfg.embed_dim], z_d)?,
        task_logits: Tensor::new(vec![n, cfg.num_classes], task)?,
        domain_logits: Tensor::new(vec![n, cfg.num_domains], domain)?,
    })
}

/// Fraction of rows whose argmax matches `labels`.
pub(crate) fn logit_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Task accuracy on labelled images.
pub fn accuracy(model: &VitModel, images: &[LabeledImage], batch_size: usize) -> Result<f64, TrainError> {
    let labels = images
        .iter()
        .enumerate()
        .map(|(i, img)| img.class_label.ok_or(TrainError::MissingClassLabels(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let out = extract(model, images, batch_size)?;
    Ok(logit_accuracy(&out.task_logits, &labels))
}
