use std::fmt::Write as _;
use std::path::Path;

pub const CSV_HEADER: &str =
    "round,phase,epoch,loss_cls,loss_dom,loss_im,loss_div,loss_pl,train_acc,domain_acc,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Task,
    Domain,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Task => "task",
            Phase::Domain => "domain",
        }
    }
}

/// One CSV row. Metrics that do not apply to the phase are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub round: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub loss_cls: Option<f64>,
    pub loss_dom: Option<f64>,
    pub loss_im: Option<f64>,
    pub loss_div: Option<f64>,
    pub loss_pl: Option<f64>,
    pub train_acc: Option<f64>,
    pub domain_acc: Option<f64>,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn new(round: usize, phase: Phase, epoch: usize) -> Self {
        Self {
            round,
            phase,
            epoch,
            loss_cls: None,
            loss_dom: None,
            loss_im: None,
            loss_div: None,
            loss_pl: None,
            train_acc: None,
            domain_acc: None,
            wall_ms: 0,
        }
    }
}

/// Per-epoch records of one training stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
    /// When false, `wall_ms` is written as 0 so files are byte-reproducible.
    pub wall_clock: bool,
}

impl MetricsLog {
    pub fn new(wall_clock: bool) -> Self {
        Self {
            records: Vec::new(),
            wall_clock,
        }
    }

    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.records {
            let wall = if self.wall_clock { r.wall_ms } else { 0 };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.phase.name(),
                r.epoch,
                f(r.loss_cls),
                f(r.loss_dom),
                f(r.loss_im),
                f(r.loss_div),
                f(r.loss_pl),
                f(r.train_acc),
                f(r.domain_acc),
                wall
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn last(&self, phase: Phase) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.phase == phase)
    }
}
