use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::forge::{generate_synthetic, load_dataset, LabeledImage};
use crate::probes::{
    a_distance, check_criterion, gamma_metrics, grid_size_sweep, load_dump, save_dump, train_domain_probe, FeatureDump,
    ProbeConfig,
};
use crate::trainer::{accuracy, run_client, run_vendor, MetricsLog, RunContext};
use crate::vit::{load_checkpoint, save_checkpoint, VitModel};

use super::{emit_report, ExperimentConfig, HarnessError, Mode, RunReport};

const EVAL_BATCH: usize = 64;

/// The six rows of the stage ablation: three vendor-only models and the
/// same three followed by client adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationRow {
    VendorSourceOnly,
    VendorDst,
    VendorDstDri,
    ClientShot,
    ClientDst,
    ClientDstDri,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::VendorSourceOnly,
        AblationRow::VendorDst,
        AblationRow::VendorDstDri,
        AblationRow::ClientShot,
        AblationRow::ClientDst,
        AblationRow::ClientDstDri,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::VendorSourceOnly => "vendor source-only",
            AblationRow::VendorDst => "vendor +DST",
            AblationRow::VendorDstDri => "vendor +DST+DRI",
            AblationRow::ClientShot => "client SHOT",
            AblationRow::ClientDst => "client +DST",
            AblationRow::ClientDstDri => "client +DST+DRI",
        }
    }

    /// `(mode, dst_enabled, dri_enabled)` for this row.
    pub fn flags(self) -> (Mode, bool, bool) {
        match self {
            AblationRow::VendorSourceOnly => (Mode::Vendor, false, false),
            AblationRow::VendorDst => (Mode::Vendor, true, false),
            AblationRow::VendorDstDri => (Mode::Vendor, true, true),
            AblationRow::ClientShot => (Mode::Full, false, false),
            AblationRow::ClientDst => (Mode::Full, true, false),
            AblationRow::ClientDstDri => (Mode::Full, true, true),
        }
    }

    /// `base` with this row's mode and ablation flags.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let (mode, dst, dri) = self.flags();
        let mut cfg = base.clone();
        cfg.mode = mode;
        cfg.flags.dst_enabled = dst;
        cfg.flags.dri_enabled = dri;
        cfg
    }
}

/// Source and target images for `cfg`.
pub fn load_domains(cfg: &ExperimentConfig) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>), HarnessError> {
    let d = &cfg.data;
    if let (Some(src), Some(tgt)) = (&d.source_path, &d.target_path) {
        let (source, _) = load_dataset(src)?;
        let (target, _) = load_dataset(tgt)?;
        return Ok((source, target));
    }
    let mut bench = generate_synthetic(&cfg.synthetic_params())?;
    let target = std::mem::take(&mut bench.domains[d.target_domain]);
    let source = std::mem::take(&mut bench.domains[d.source_domain]);
    Ok((source, target))
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let dir = &cfg.output_dir;
    let occupied = dir.exists() && fs::read_dir(dir)?.next().is_some();
    if occupied && !cfg.force {
        return Err(HarnessError::OutputExists(dir.clone()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn context(cfg: &ExperimentConfig) -> RunContext {
    RunContext {
        schedule: cfg.schedule.clone(),
        flags: cfg.flags.clone(),
        specs: cfg.augmentations.clone(),
        grid: cfg.grid,
        seed: cfg.seed,
    }
}

fn model_from(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<VitModel, HarnessError> {
    let mut model = VitModel::new(cfg.model_config())?;
    if let Some(p) = checkpoint {
        load_checkpoint(&mut model, p)?;
    }
    Ok(model)
}

/// Source images as domain 0 and target images as domain 1.
fn combined(source: &[LabeledImage], target: &[LabeledImage]) -> Vec<LabeledImage> {
    let relabel = |imgs: &[LabeledImage], d: usize| {
        imgs.iter()
            .map(|img| LabeledImage {
                domain_label: Some(d),
                ..img.clone()
            })
            .collect::<Vec<_>>()
    };
    [relabel(source, 0), relabel(target, 1)].concat()
}

fn probe_dump(cfg: &ExperimentConfig, dump: &FeatureDump, report: &mut RunReport) -> Result<(), HarnessError> {
    let gamma = gamma_metrics(dump)?;
    report.gamma = Some(check_criterion(gamma, cfg.probe.tau)?);
    let probe_cfg = ProbeConfig {
        epochs: cfg.probe.epochs,
        lr: cfg.probe.lr,
        ..ProbeConfig::default()
    };
    let probe = train_domain_probe(dump, probe_cfg, cfg.seed)?;
    report.domain_probe_accuracy = Some(probe.accuracy);
    report.a_distance = Some(a_distance(probe.error()));
    Ok(())
}

/// Runs the configured mode end to end, writing checkpoints, metrics CSVs,
/// the feature dump and the report into `cfg.output_dir` as each becomes
/// available.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    prepare_output(cfg)?;
    let start = Instant::now();
    let out = &cfg.output_dir;
    let mut report = RunReport::new(cfg.mode, cfg.to_entries());
    report.negative_control = cfg.flags.negative_control;
    let ctx = context(cfg);

    if cfg.mode == Mode::Probe {
        if let Some(p) = &cfg.dump {
            probe_dump(cfg, &load_dump(p)?, &mut report)?;
            return finish(cfg, report, start);
        }
    }

    let (source, target) = load_domains(cfg)?;
    let mut model = model_from(cfg, cfg.checkpoint.as_deref())?;

    let train_vendor = matches!(cfg.mode, Mode::Vendor | Mode::Full)
        || (cfg.mode == Mode::Sweep && cfg.checkpoint.is_none());
    if train_vendor {
        let mut log = MetricsLog::new(cfg.wall_clock);
        let result = run_vendor(&mut model, &source, &ctx, &mut log);
        let csv = out.join("vendor_metrics.csv");
        log.write_csv(&csv)?;
        report.vendor_metrics_csv = Some(csv);
        result?;
        save_checkpoint(&model, out.join("vendor.ck"))?;
    }
    if matches!(cfg.mode, Mode::Vendor | Mode::Client | Mode::Full) {
        report.source_accuracy = Some(accuracy(&model, &source, EVAL_BATCH)?);
        report.vendor_target_accuracy = Some(accuracy(&model, &target, EVAL_BATCH)?);
    }
    if matches!(cfg.mode, Mode::Client | Mode::Full) {
        let mut log = MetricsLog::new(cfg.wall_clock);
        let result = run_client(&mut model, &target, &ctx, &mut log);
        let csv = out.join("client_metrics.csv");
        log.write_csv(&csv)?;
        report.client_metrics_csv = Some(csv);
        report.warnings = result?.iter().map(ToString::to_string).collect();
        save_checkpoint(&model, out.join("client.ck"))?;
        report.target_accuracy = Some(accuracy(&model, &target, EVAL_BATCH)?);
    }
    if matches!(cfg.mode, Mode::Vendor | Mode::Probe | Mode::Full) {
        let dump = FeatureDump::from_model(&model, &combined(&source, &target), EVAL_BATCH)?;
        save_dump(&dump, out.join("features.dsfd"))?;
        probe_dump(cfg, &dump, &mut report)?;
    }
    if cfg.mode == Mode::Sweep {
        let n = cfg.sweep.images.min(source.len());
        report.sweep = grid_size_sweep(&model, &source[..n], &cfg.augmentations, &cfg.sweep.grids, cfg.seed)?;
        let mut csv = String::from("grid,domain_nmi,class_nmi\n");
        for p in &report.sweep {
            csv.push_str(&format!("{},{},{}\n", p.grid, p.domain_nmi, p.class_nmi));
        }
        fs::write(out.join("sweep.csv"), csv)?;
    }
    finish(cfg, report, start)
}

fn finish(cfg: &ExperimentConfig, mut report: RunReport, start: Instant) -> Result<RunReport, HarnessError> {
    if cfg.wall_clock {
        report.wall_ms = start.elapsed().as_millis() as u64;
    }
    emit_report(&report, &cfg.output_dir)?;
    Ok(report)
}

/// The negative control: vendor task training also sees shuffled inputs
/// carrying their pre-shuffle class labels. The report is tagged.
pub fn dri_as_augmentation_mode(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let mut cfg = cfg.clone();
    cfg.flags.negative_control = true;
    run_experiment(&cfg)
}
