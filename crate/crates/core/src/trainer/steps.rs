use dsit_tensor::{Tape, Tensor, Var};

use crate::forge::{stack_images, DriBatch, DriSample, LabeledImage, NegativeControl};
use crate::vit::{ParamGroup, VitModel};

use super::losses::{div_loss, im_loss};
use super::{sgd_step, OptimState, TrainError};

/// Labelled images ready for the task loss. Shuffled inputs cannot become a
/// `LabeledBatch` except through the guarded negative-control constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a LabeledImage>) -> Result<Self, TrainError> {
        let images: Vec<&LabeledImage> = images.into_iter().collect();
        if images.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let labels = images
            .iter()
            .enumerate()
            .map(|(i, img)| img.class_label.ok_or(TrainError::MissingClassLabels(i)))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            inputs: stack_images(images),
            labels,
        })
    }

    /// Shuffled inputs labelled with the class of the image they came from.
    pub fn negative_control(samples: &[&DriSample], guard: NegativeControl) -> Result<Self, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let labels = crate::forge::task_labels(samples, guard)?;
        let pixels: Vec<&Tensor> = samples.iter().map(|s| &s.pixels).collect();
        Ok(Self {
            inputs: Tensor::stack(&pixels)?,
            labels,
        })
    }

    /// Appends `other` to this batch.
    pub fn concat(self, other: &LabeledBatch) -> Result<Self, TrainError> {
        let mut shape = self.inputs.shape().to_vec();
        shape[0] += other.inputs.shape()[0];
        let inputs = Tensor::new(shape, [self.inputs.data(), other.inputs.data()].concat())?;
        Ok(Self {
            inputs,
            labels: [self.labels, other.labels.clone()].concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loss and accuracy of one step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

fn count_correct(logits: &Var<'_>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn backward_and_step(
    model: &mut VitModel,
    tape: &Tape,
    bound: &crate::vit::BoundParams<'_>,
    loss: Var<'_>,
    groups: &[ParamGroup],
    opt: &OptimState,
) -> Result<(), TrainError> {
    let mut grads = tape.backward(loss)?;
    model.params_mut().store_grads(bound, &mut grads);
    sgd_step(model.params_mut(), groups, opt)?;
    model.params_mut().clear_grads();
    Ok(())
}

/// Cross-entropy of the domain head on shuffled inputs; updates `groups`,
/// which for split routing are the query projections and the domain head.
pub fn domain_step(
    model: &mut VitModel,
    batch: &DriBatch,
    groups: &[ParamGroup],
    opt: &OptimState,
) -> Result<StepStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let tape = Tape::new();
    let bound = model.params().bind(&tape, groups);
    let out = model.forward(&tape, &bound, &batch.inputs)?;
    let loss = out.domain_logits.cross_entropy(&batch.domain_labels)?;
    let stats = StepStats {
        loss: loss.item()?,
        correct: count_correct(&out.domain_logits, &batch.domain_labels),
        total: batch.len(),
    };
    backward_and_step(model, &tape, &bound, loss, groups, opt)?;
    Ok(stats)
}

/// Cross-entropy of the task head on labelled source images.
pub fn task_step_vendor(
    model: &mut VitModel,
    batch: &LabeledBatch,
    groups: &[ParamGroup],
    opt: &OptimState,
) -> Result<StepStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let tape = Tape::new();
    let bound = model.params().bind(&tape, groups);
    let out = model.forward(&tape, &bound, &batch.inputs)?;
    let loss = out.task_logits.cross_entropy(&batch.labels)?;
    let stats = StepStats {
        loss: loss.item()?,
        correct: count_correct(&out.task_logits, &batch.labels),
        total: batch.len(),
    };
    backward_and_step(model, &tape, &bound, loss, groups, opt)?;
    Ok(stats)
}

/// Loss components of one client step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClientStepStats {
    pub im: f64,
    pub div: f64,
    pub pl: f64,
}

/// `L_im + L_div + λ·CE(pseudo)` on unlabelled target inputs. `pseudo` is
/// either empty or has one label per input row.
pub fn client_task_step(
    model: &mut VitModel,
    inputs: &Tensor,
    pseudo: &[usize],
    lambda_pl: f64,
    groups: &[ParamGroup],
    opt: &OptimState,
) -> Result<ClientStepStats, TrainError> {
    let b = inputs.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if !pseudo.is_empty() && pseudo.len() != b {
        return Err(TrainError::InvalidSchedule(format!(
            "{} pseudo-labels for {b} inputs",
            pseudo.len()
        )));
    }
    let tape = Tape::new();
    let bound = model.params().bind(&tape, groups);
    let out = model.forward(&tape, &bound, inputs)?;
    let im = im_loss(out.task_logits)?;
    let div = div_loss(out.task_logits)?;
    let mut stats = ClientStepStats {
        im: im.item()?,
        div: div.item()?,
        pl: 0.0,
    };
    let mut loss = im.add(div)?;
    if lambda_pl > 0.0 && !pseudo.is_empty() {
        let pl = out.task_logits.cross_entropy(pseudo)?;
        stats.pl = pl.item()?;
        loss = loss.add(pl.scale(lambda_pl)?)?;
    }
    backward_and_step(model, &tape, &bound, loss, groups, opt)?;
    Ok(stats)
}
