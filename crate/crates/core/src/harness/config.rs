use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::forge::{default_specs, AugmentationKind, AugmentationSpec, ForgeError, SyntheticParams};
use crate::trainer::{TrainFlags, TrainSchedule};
use crate::vit::VitConfig;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Vendor,
    Client,
    Probe,
    Sweep,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Vendor, Mode::Client, Mode::Probe, Mode::Sweep, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vendor => "vendor",
            Mode::Client => "client",
            Mode::Probe => "probe",
            Mode::Sweep => "sweep",
            Mode::Full => "full",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Where images come from: the synthetic generator, or two dataset files.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub synthetic: SyntheticParams,
    pub source_domain: usize,
    pub target_domain: usize,
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticParams::default(),
            source_domain: 0,
            target_domain: 1,
            source_path: None,
            target_path: None,
        }
    }
}

impl DataConfig {
    pub fn uses_files(&self) -> bool {
        self.source_path.is_some() || self.target_path.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            tau: crate::probes::DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub grids: Vec<usize>,
    /// Images taken from the source domain for the sweep.
    pub images: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            grids: vec![1, 2, 4, 8],
            images: 200,
        }
    }
}

/// Everything one invocation needs. `seed` drives data generation, model
/// initialisation and every shuffle.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: VitConfig,
    pub data: DataConfig,
    pub schedule: TrainSchedule,
    pub augmentations: Vec<AugmentationSpec>,
    pub grid: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub flags: TrainFlags,
    pub probe: ProbeSettings,
    pub sweep: SweepSettings,
    /// Vendor checkpoint read by client, probe and sweep modes.
    pub checkpoint: Option<PathBuf>,
    /// Feature dump read by probe mode instead of a checkpoint.
    pub dump: Option<PathBuf>,
    /// When false, wall-clock fields are written as 0 so reruns are
    /// byte-identical.
    pub wall_clock: bool,
    pub force: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            model: VitConfig::default(),
            data: DataConfig::default(),
            schedule: TrainSchedule::default(),
            augmentations: default_specs(),
            grid: 4,
            seed: 0,
            output_dir: PathBuf::from("dsit-out"),
            flags: TrainFlags::default(),
            probe: ProbeSettings::default(),
            sweep: SweepSettings::default(),
            checkpoint: None,
            dump: None,
            wall_clock: true,
            force: false,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {value:?}")),
    }
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Why a single line was rejected.
enum KeyError {
    Unknown,
    Value(String),
}

impl From<String> for KeyError {
    fn from(s: String) -> Self {
        KeyError::Value(s)
    }
}

impl ExperimentConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), KeyError> {
        let m = &mut self.model;
        let d = &mut self.data;
        let s = &mut self.schedule;
        match key {
            "mode" => self.mode = parse(value)?,
            "seed" => self.seed = parse(value)?,
            "grid" => self.grid = parse(value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = parse_path(value),
            "dump" => self.dump = parse_path(value),
            "force" => self.force = parse_bool(value)?,
            "dst_enabled" => self.flags.dst_enabled = parse_bool(value)?,
            "dri_enabled" => self.flags.dri_enabled = parse_bool(value)?,
            "lambda_pl" => self.flags.lambda_pl = parse(value)?,
            "negative_control" => self.flags.negative_control = parse_bool(value)?,
            "augmentations" => {
                let kinds: Vec<AugmentationKind> = parse_list(value)?;
                self.augmentations = kinds
                    .into_iter()
                    .enumerate()
                    .map(|(i, k)| AugmentationSpec::with_defaults(k, i))
                    .collect();
            }
            "report.wall_clock" => self.wall_clock = parse_bool(value)?,
            "model.image_size" => m.image_size = parse(value)?,
            "model.channels" => m.channels = parse(value)?,
            "model.patch_size" => m.patch_size = parse(value)?,
            "model.embed_dim" => m.embed_dim = parse(value)?,
            "model.num_heads" => m.num_heads = parse(value)?,
            "model.num_layers" => m.num_layers = parse(value)?,
            "model.num_classes" => m.num_classes = parse(value)?,
            "model.num_domains" => m.num_domains = parse(value)?,
            "data.num_classes" => d.synthetic.num_classes = parse(value)?,
            "data.num_true_domains" => d.synthetic.num_true_domains = parse(value)?,
            "data.n_per_cell" => d.synthetic.n_per_cell = parse(value)?,
            "data.shift_strength" => d.synthetic.shift_strength = parse(value)?,
            "data.source_domain" => d.source_domain = parse(value)?,
            "data.target_domain" => d.target_domain = parse(value)?,
            "data.source_path" => d.source_path = parse_path(value),
            "data.target_path" => d.target_path = parse_path(value),
            "schedule.vendor_epochs" => s.vendor_epochs = parse(value)?,
            "schedule.vendor_warmup_epochs" => s.vendor_warmup_epochs = parse(value)?,
            "schedule.warmup_factor" => s.warmup_factor = parse(value)?,
            "schedule.vendor_domain_epochs" => s.vendor_domain_epochs = parse(value)?,
            "schedule.max_rounds" => s.max_rounds = parse(value)?,
            "schedule.task_epochs_per_round" => s.task_epochs_per_round = parse(value)?,
            "schedule.domain_acc_target" => s.domain_acc_target = parse(value)?,
            "schedule.max_domain_epochs" => s.max_domain_epochs = parse(value)?,
            "schedule.batch_size" => s.batch_size = parse(value)?,
            "schedule.refresh_every" => s.refresh_every = parse(value)?,
            "schedule.vendor_task_lr" => s.vendor_task_lr = parse(value)?,
            "schedule.vendor_domain_lr" => s.vendor_domain_lr = parse(value)?,
            "schedule.client_task_lr" => s.client_task_lr = parse(value)?,
            "schedule.client_domain_lr" => s.client_domain_lr = parse(value)?,
            "schedule.momentum" => s.momentum = parse(value)?,
            "schedule.weight_decay" => s.weight_decay = parse(value)?,
            "probe.epochs" => self.probe.epochs = parse(value)?,
            "probe.lr" => self.probe.lr = parse(value)?,
            "probe.tau" => self.probe.tau = parse(value)?,
            "sweep.grids" => self.sweep.grids = parse_list(value)?,
            "sweep.images" => self.sweep.images = parse(value)?,
            _ => {
                let Some(kind) = key.strip_prefix("augment.") else {
                    return Err(KeyError::Unknown);
                };
                let kind: AugmentationKind = kind.parse().map_err(|e: ForgeError| e.to_string())?;
                let params: Vec<f64> = parse_list(value)?;
                let spec = self
                    .augmentations
                    .iter_mut()
                    .find(|a| a.kind == kind)
                    .ok_or_else(|| format!("augmentation {kind} is not in the augmentation list"))?;
                spec.params = params;
            }
        }
        Ok(())
    }

    /// Every key with its current value, in the syntax `parse_config` reads.
    pub fn to_entries(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let d = &self.data;
        let s = &self.schedule;
        let kinds: Vec<&str> = self.augmentations.iter().map(|a| a.kind.name()).collect();
        let mut out: BTreeMap<String, String> = [
            ("mode", self.mode.to_string()),
            ("seed", self.seed.to_string()),
            ("grid", self.grid.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("checkpoint", show_path(&self.checkpoint)),
            ("dump", show_path(&self.dump)),
            ("force", self.force.to_string()),
            ("dst_enabled", self.flags.dst_enabled.to_string()),
            ("dri_enabled", self.flags.dri_enabled.to_string()),
            ("lambda_pl", self.flags.lambda_pl.to_string()),
            ("negative_control", self.flags.negative_control.to_string()),
            ("augmentations", join(&kinds)),
            ("report.wall_clock", self.wall_clock.to_string()),
            ("model.image_size", m.image_size.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.num_heads", m.num_heads.to_string()),
            ("model.num_layers", m.num_layers.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.num_domains", m.num_domains.to_string()),
            ("data.num_classes", d.synthetic.num_classes.to_string()),
            ("data.num_true_domains", d.synthetic.num_true_domains.to_string()),
            ("data.n_per_cell", d.synthetic.n_per_cell.to_string()),
            ("data.shift_strength", d.synthetic.shift_strength.to_string()),
            ("data.source_domain", d.source_domain.to_string()),
            ("data.target_domain", d.target_domain.to_string()),
            ("data.source_path", show_path(&d.source_path)),
            ("data.target_path", show_path(&d.target_path)),
            ("schedule.vendor_epochs", s.vendor_epochs.to_string()),
            ("schedule.vendor_warmup_epochs", s.vendor_warmup_epochs.to_string()),
            ("schedule.warmup_factor", s.warmup_factor.to_string()),
            ("schedule.vendor_domain_epochs", s.vendor_domain_epochs.to_string()),
            ("schedule.max_rounds", s.max_rounds.to_string()),
            ("schedule.task_epochs_per_round", s.task_epochs_per_round.to_string()),
            ("schedule.domain_acc_target", s.domain_acc_target.to_string()),
            ("schedule.max_domain_epochs", s.max_domain_epochs.to_string()),
            ("schedule.batch_size", s.batch_size.to_string()),
            ("schedule.refresh_every", s.refresh_every.to_string()),
            ("schedule.vendor_task_lr", s.vendor_task_lr.to_string()),
            ("schedule.vendor_domain_lr", s.vendor_domain_lr.to_string()),
            ("schedule.client_task_lr", s.client_task_lr.to_string()),
            ("schedule.client_domain_lr", s.client_domain_lr.to_string()),
            ("schedule.momentum", s.momentum.to_string()),
            ("schedule.weight_decay", s.weight_decay.to_string()),
            ("probe.epochs", self.probe.epochs.to_string()),
            ("probe.lr", self.probe.lr.to_string()),
            ("probe.tau", self.probe.tau.to_string()),
            ("sweep.grids", join(&self.sweep.grids)),
            ("sweep.images", self.sweep.images.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for a in &self.augmentations {
            out.insert(format!("augment.{}", a.kind.name()), join(&a.params));
        }
        out
    }

    /// The configuration as a file `parse_config` reads back to an equal value.
    pub fn to_text(&self) -> String {
        // The augmentation list must precede its parameter overrides.
        let entries = self.to_entries();
        let mut text = format!("augmentations = {}\n", entries["augmentations"]);
        for (k, v) in entries.iter().filter(|(k, _)| *k != "augmentations") {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text
    }

    /// Checks every cross-field constraint before any compute starts.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvariantViolation(m));
        self.model.validate()?;
        self.schedule.validate()?;
        if self.flags.dri_enabled && !self.flags.dst_enabled {
            return bad("dri_enabled requires dst_enabled".into());
        }
        if !(self.flags.lambda_pl.is_finite() && self.flags.lambda_pl >= 0.0) {
            return bad(format!("lambda_pl must be finite and non-negative, got {}", self.flags.lambda_pl));
        }
        if self.augmentations.len() < 2 {
            return Err(ForgeError::TooFewDomains(self.augmentations.len()).into());
        }
        for a in &self.augmentations {
            a.validate()?;
        }
        if self.model.num_domains != self.augmentations.len() {
            return bad(format!(
                "model.num_domains is {} but {} augmentations are listed",
                self.model.num_domains,
                self.augmentations.len()
            ));
        }
        let size = self.model.image_size;
        for &g in std::iter::once(&self.grid).chain(&self.sweep.grids) {
            if g == 0 || size % g != 0 {
                return Err(ForgeError::IndivisibleGrid { size, grid: g }.into());
            }
        }
        if !(self.probe.tau > 0.0) || !(self.probe.lr > 0.0) {
            return bad("probe.tau and probe.lr must be positive".into());
        }
        if self.sweep.images == 0 {
            return bad("sweep.images must be positive".into());
        }
        let d = &self.data;
        if d.uses_files() {
            for p in [&d.source_path, &d.target_path] {
                match p {
                    None => return bad("data.source_path and data.target_path must be given together".into()),
                    Some(p) => require_path(p)?,
                }
            }
        } else {
            d.synthetic.validate()?;
            let syn = &d.synthetic;
            if syn.num_classes != self.model.num_classes {
                return bad(format!(
                    "data.num_classes {} differs from model.num_classes {}",
                    syn.num_classes, self.model.num_classes
                ));
            }
            if d.source_domain == d.target_domain
                || d.source_domain >= syn.num_true_domains
                || d.target_domain >= syn.num_true_domains
            {
                return bad(format!(
                    "source and target domains must be distinct and below {}",
                    syn.num_true_domains
                ));
            }
        }
        match self.mode {
            Mode::Client => {
                let Some(p) = &self.checkpoint else {
                    return bad("client mode needs a vendor checkpoint".into());
                };
                require_path(p)?;
            }
            Mode::Probe => match (&self.dump, &self.checkpoint) {
                (Some(p), _) | (None, Some(p)) => require_path(p)?,
                (None, None) => return bad("probe mode needs a feature dump or a checkpoint".into()),
            },
            _ => {
                if let Some(p) = &self.checkpoint {
                    require_path(p)?;
                }
            }
        }
        Ok(())
    }

    /// Model architecture seeded with the experiment seed.
    pub fn model_config(&self) -> VitConfig {
        VitConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Synthetic images at the model's resolution.
    pub(crate) fn synthetic_params(&self) -> SyntheticParams {
        SyntheticParams {
            seed: self.seed,
            image_size: self.model.image_size,
            channels: self.model.channels,
            ..self.data.synthetic.clone()
        }
    }
}

fn require_path(p: &Path) -> Result<(), HarnessError> {
    if p.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingPath(p.to_path_buf()))
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// ignored; missing keys keep their defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(HarnessError::Parse {
                line: line_no,
                message: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = key.trim();
        let value = value.trim().trim_matches('"');
        cfg.set(key, value).map_err(|e| match e {
            KeyError::Unknown => HarnessError::UnknownKey {
                line: line_no,
                key: key.to_string(),
            },
            KeyError::Value(message) => HarnessError::Parse { line: line_no, message },
        })?;
    }
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|_| HarnessError::MissingPath(path.to_path_buf()))?;
    parse_config_str(&text)
}
