use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::forge::{dri_subset, sample_seed, AugmentationSpec, DriBatch, LabeledImage, NegativeControl};
use crate::vit::{ParamGroup, VitModel};

use super::eval::extract;
use super::log::{EpochRecord, MetricsLog, Phase};
use super::steps::{client_task_step, domain_step, task_step_vendor, LabeledBatch, StepStats};
use super::{OptimState, PseudoLabelState, TrainError, TrainFlags, TrainSchedule, Warmup};

const STAGE_VENDOR_TASK: u64 = 1;
const STAGE_VENDOR_DOMAIN: u64 = 2;
const STAGE_VENDOR_NEGATIVE: u64 = 3;
const STAGE_CLIENT_TASK: u64 = 4;
const STAGE_CLIENT_DOMAIN: u64 = 5;

/// Everything a training stage needs besides the model and data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunContext {
    pub schedule: TrainSchedule,
    pub flags: TrainFlags,
    pub specs: Vec<AugmentationSpec>,
    pub grid: usize,
    pub seed: u64,
}

impl RunContext {
    fn epoch_seed(&self, stage: u64, epoch: usize) -> u64 {
        sample_seed(sample_seed(self.seed, stage), epoch as u64)
    }

    fn optim(&self, lr: f64, warmup: Warmup) -> OptimState {
        OptimState {
            lr,
            momentum: self.schedule.momentum,
            weight_decay: self.schedule.weight_decay,
            warmup,
        }
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

#[derive(Default)]
struct Running {
    loss: f64,
    correct: usize,
    total: usize,
}

impl Running {
    fn add(&mut self, s: StepStats) {
        self.loss += s.loss * s.total as f64;
        self.correct += s.correct;
        self.total += s.total;
    }

    fn loss(&self) -> f64 {
        self.loss / self.total.max(1) as f64
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

/// One pass of domain steps over `data.len()` shuffled inputs drawn afresh
/// from the `|data|·|specs|` augmented index space.
fn domain_epoch(
    model: &mut VitModel,
    data: &[LabeledImage],
    ctx: &RunContext,
    opt: &OptimState,
    seed: u64,
) -> Result<Running, TrainError> {
    let grid = ctx.flags.domain_grid(ctx.grid);
    let order = permutation(data.len() * ctx.specs.len(), seed);
    let groups = ctx.flags.routing().domain_groups();
    let mut run = Running::default();
    for chunk in order[..data.len()].chunks(ctx.schedule.batch_size) {
        let samples = dri_subset(data, &ctx.specs, grid, seed, chunk)?;
        let batch = DriBatch::new(&samples, grid)?;
        run.add(domain_step(model, &batch, groups, opt)?);
    }
    Ok(run)
}

/// Source training: alternates one task epoch with
/// `vendor_domain_epochs` domain epochs, under linear warm-up. Starts from
/// fresh momentum buffers.
pub fn run_vendor(
    model: &mut VitModel,
    source: &[LabeledImage],
    ctx: &RunContext,
    log: &mut MetricsLog,
) -> Result<(), TrainError> {
    ctx.schedule.validate()?;
    if source.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    model.params_mut().reset_velocities();
    let s = &ctx.schedule;
    let warmup = Warmup {
        epochs: s.vendor_warmup_epochs,
        factor: s.warmup_factor,
    };
    let task_opt = ctx.optim(s.vendor_task_lr, warmup);
    let domain_opt = ctx.optim(s.vendor_domain_lr, warmup);
    let task_groups = ctx.flags.routing().task_groups();
    let guard = NegativeControl::new(ctx.flags.negative_control);
    let mut domain_epoch_index = 0;

    for epoch in 0..s.vendor_epochs {
        let start = Instant::now();
        let opt = task_opt.at_epoch(epoch);
        let order = permutation(source.len(), ctx.epoch_seed(STAGE_VENDOR_TASK, epoch));
        let negative_seed = ctx.epoch_seed(STAGE_VENDOR_NEGATIVE, epoch);
        let negative_order = permutation(source.len() * ctx.specs.len(), negative_seed);
        let mut run = Running::default();
        for (b, chunk) in order.chunks(s.batch_size).enumerate() {
            let mut batch = LabeledBatch::from_images(chunk.iter().map(|&i| &source[i]))?;
            if guard.enabled() {
                let picks = &negative_order[b * s.batch_size..][..chunk.len()];
                let samples = dri_subset(source, &ctx.specs, ctx.grid, negative_seed, picks)?;
                let refs: Vec<_> = samples.iter().collect();
                batch = batch.concat(&LabeledBatch::negative_control(&refs, guard)?)?;
            }
            run.add(task_step_vendor(model, &batch, task_groups, &opt)?);
        }
        let mut rec = EpochRecord::new(epoch, Phase::Task, epoch);
        rec.loss_cls = Some(run.loss());
        rec.train_acc = Some(run.accuracy());
        rec.wall_ms = elapsed_ms(start);
        log.push(rec);

        if !ctx.flags.dst_enabled {
            continue;
        }
        let opt = domain_opt.at_epoch(epoch);
        for _ in 0..s.vendor_domain_epochs {
            let start = Instant::now();
            let seed = ctx.epoch_seed(STAGE_VENDOR_DOMAIN, domain_epoch_index);
            let run = domain_epoch(model, source, ctx, &opt, seed)?;
            let mut rec = EpochRecord::new(epoch, Phase::Domain, domain_epoch_index);
            rec.loss_dom = Some(run.loss());
            rec.domain_acc = Some(run.accuracy());
            rec.wall_ms = elapsed_ms(start);
            log.push(rec);
            domain_epoch_index += 1;
        }
    }
    Ok(())
}

/// Mean client losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClientEpochStats {
    pub im: f64,
    pub div: f64,
    pub pl: f64,
}

/// One epoch of information maximisation plus pseudo-label cross-entropy
/// over the unlabelled target set. Class labels on `target` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn adapt_epoch_client(
    model: &mut VitModel,
    target: &[LabeledImage],
    pseudo: &mut PseudoLabelState,
    opt: &OptimState,
    lambda_pl: f64,
    groups: &[ParamGroup],
    batch_size: usize,
    seed: u64,
) -> Result<ClientEpochStats, TrainError> {
    if target.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let use_pl = lambda_pl > 0.0;
    if use_pl {
        pseudo.check_fresh()?;
        if pseudo.is_due() {
            let feats = extract(model, target, batch_size)?;
            pseudo.refresh(&feats.z_c, &feats.task_logits)?;
        }
    }
    let order = permutation(target.len(), seed);
    let mut sums = ClientEpochStats::default();
    let mut batches = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let inputs = crate::forge::stack_images(chunk.iter().map(|&i| &target[i]));
        let labels: Vec<usize> = if use_pl {
            chunk.iter().map(|&i| pseudo.assignments[i]).collect()
        } else {
            Vec::new()
        };
        let s = client_task_step(model, &inputs, &labels, lambda_pl, groups, opt)?;
        sums.im += s.im;
        sums.div += s.div;
        sums.pl += s.pl;
        batches += 1.0;
    }
    pseudo.age += 1;
    Ok(ClientEpochStats {
        im: sums.im / batches,
        div: sums.div / batches,
        pl: sums.pl / batches,
    })
}

/// Target adaptation: each round runs `task_epochs_per_round` client task
/// epochs, then domain epochs on target DRI until the running domain
/// accuracy reaches the target or the cap is hit. Cap hits are returned as
/// warnings and do not stop training. Starts from fresh momentum buffers,
/// since only the weights cross from vendor to client.
pub fn run_client(
    model: &mut VitModel,
    target: &[LabeledImage],
    ctx: &RunContext,
    log: &mut MetricsLog,
) -> Result<Vec<TrainError>, TrainError> {
    ctx.schedule.validate()?;
    if target.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    model.params_mut().reset_velocities();
    let s = &ctx.schedule;
    let task_opt = ctx.optim(s.client_task_lr, Warmup::NONE);
    let domain_opt = ctx.optim(s.client_domain_lr, Warmup::NONE);
    let groups = ctx.flags.routing().task_groups();
    let mut pseudo = PseudoLabelState::new(s.refresh_every);
    let mut warnings = Vec::new();
    let (mut task_epoch, mut domain_epoch_index) = (0, 0);

    for round in 0..s.max_rounds {
        for _ in 0..s.task_epochs_per_round {
            let start = Instant::now();
            let seed = ctx.epoch_seed(STAGE_CLIENT_TASK, task_epoch);
            let st = adapt_epoch_client(
                model,
                target,
                &mut pseudo,
                &task_opt,
                ctx.flags.lambda_pl,
                groups,
                s.batch_size,
                seed,
            )?;
            let mut rec = EpochRecord::new(round, Phase::Task, task_epoch);
            rec.loss_im = Some(st.im);
            rec.loss_div = Some(st.div);
            rec.loss_pl = Some(st.pl);
            rec.wall_ms = elapsed_ms(start);
            log.push(rec);
            task_epoch += 1;
        }
        if !ctx.flags.dst_enabled {
            continue;
        }
        let mut reached = false;
        let mut last_acc = 0.0;
        for _ in 0..s.max_domain_epochs {
            let start = Instant::now();
            let seed = ctx.epoch_seed(STAGE_CLIENT_DOMAIN, domain_epoch_index);
            let run = domain_epoch(model, target, ctx, &domain_opt, seed)?;
            let mut rec = EpochRecord::new(round, Phase::Domain, domain_epoch_index);
            rec.loss_dom = Some(run.loss());
            rec.domain_acc = Some(run.accuracy());
            rec.wall_ms = elapsed_ms(start);
            log.push(rec);
            domain_epoch_index += 1;
            last_acc = run.accuracy();
            if last_acc >= s.domain_acc_target {
                reached = true;
                break;
            }
        }
        if !reached {
            warnings.push(TrainError::DomainAccuracyUnreachable {
                round,
                accuracy: last_acc,
                epochs: s.max_domain_epochs,
            });
        }
    }
    Ok(warnings)
}
