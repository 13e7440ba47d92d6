use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dsit::harness::{parse_config, run_experiment, selftest, ExperimentConfig, HarnessError, Mode};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Vendor,
    Client,
    Probe,
    Sweep,
    Full,
    Selftest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

/// Train, adapt and probe domain-specific vision transformers.
#[derive(Debug, Parser)]
#[command(name = "dsit", version)]
struct Cli {
    mode: Command,
    /// Experiment config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialisation and every shuffle.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Alternating domain-specificity training; `off` also disables shuffling.
    #[arg(long)]
    dst: Option<Switch>,
    /// Patch shuffling of the domain-training inputs.
    #[arg(long)]
    dri: Option<Switch>,
    /// Weight of the pseudo-label loss during adaptation.
    #[arg(long = "lambda-pl")]
    lambda_pl: Option<f64>,
    /// Shuffle grid size; must divide the image side.
    #[arg(long)]
    grid: Option<usize>,
}

fn build_config(cli: &Cli, mode: Mode) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.mode = mode;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.force |= cli.force;
    if let Some(dst) = cli.dst {
        cfg.flags.dst_enabled = dst.into();
        cfg.flags.dri_enabled &= cfg.flags.dst_enabled;
    }
    if let Some(dri) = cli.dri {
        cfg.flags.dri_enabled = dri.into();
    }
    if let Some(lambda) = cli.lambda_pl {
        cfg.flags.lambda_pl = lambda;
    }
    if let Some(grid) = cli.grid {
        cfg.grid = grid;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn is_config_error(e: &HarnessError) -> bool {
    matches!(
        e,
        HarnessError::Parse { .. }
            | HarnessError::UnknownKey { .. }
            | HarnessError::InvariantViolation(_)
            | HarnessError::MissingPath(_)
            | HarnessError::OutputExists(_)
    )
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("DSIT_THREADS") else { return Ok(()) };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DSIT_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let mode = match cli.mode {
        Command::Selftest => {
            let checks = selftest();
            for c in &checks {
                println!("{} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
            }
            return if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::from(3) };
        }
        Command::Vendor => Mode::Vendor,
        Command::Client => Mode::Client,
        Command::Probe => Mode::Probe,
        Command::Sweep => Mode::Sweep,
        Command::Full => Mode::Full,
    };
    let cfg = match build_config(&cli, mode) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run_experiment(&cfg) {
        Ok(report) => {
            print!("{}", report.summary());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}
