use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::probes::{Gamma, GammaReport, SweepPoint};

use super::{HarnessError, Mode};

/// Outcome of one invocation. Absent fields did not apply to the mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub mode: Mode,
    pub negative_control: bool,
    /// The configuration that produced the run, as `key = value` entries.
    pub config: BTreeMap<String, String>,
    pub vendor_metrics_csv: Option<PathBuf>,
    pub client_metrics_csv: Option<PathBuf>,
    pub source_accuracy: Option<f64>,
    /// Target accuracy of the vendor model before adaptation.
    pub vendor_target_accuracy: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub gamma: Option<GammaReport>,
    pub domain_probe_accuracy: Option<f64>,
    pub a_distance: Option<f64>,
    pub sweep: Vec<SweepPoint>,
    pub warnings: Vec<String>,
    pub wall_ms: u64,
}

impl RunReport {
    pub fn new(mode: Mode, config: BTreeMap<String, String>) -> Self {
        Self {
            mode,
            negative_control: false,
            config,
            vendor_metrics_csv: None,
            client_metrics_csv: None,
            source_accuracy: None,
            vendor_target_accuracy: None,
            target_accuracy: None,
            gamma: None,
            domain_probe_accuracy: None,
            a_distance: None,
            sweep: Vec::new(),
            warnings: Vec::new(),
            wall_ms: 0,
        }
    }

    /// Flat `key = value` document; `from_kv` reads it back.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("mode", self.mode.to_string());
        put("negative_control", self.negative_control.to_string());
        for (k, v) in &self.config {
            put(&format!("config.{k}"), v.clone());
        }
        let paths = [
            ("vendor_metrics_csv", &self.vendor_metrics_csv),
            ("client_metrics_csv", &self.client_metrics_csv),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        let numbers = [
            ("source_accuracy", self.source_accuracy),
            ("vendor_target_accuracy", self.vendor_target_accuracy),
            ("target_accuracy", self.target_accuracy),
            ("domain_probe_accuracy", self.domain_probe_accuracy),
            ("a_distance", self.a_distance),
        ];
        for (k, v) in numbers {
            if let Some(v) = v {
                put(k, v.to_string());
            }
        }
        if let Some(g) = &self.gamma {
            put("gamma.cls", g.gamma.cls.to_string());
            put("gamma.dom", g.gamma.dom.to_string());
            put("gamma.all", g.gamma.all.to_string());
            put("gamma.tau", g.tau.to_string());
            put("gamma.disentangled", g.disentangled.to_string());
        }
        for (i, p) in self.sweep.iter().enumerate() {
            put(&format!("sweep.{i}.grid"), p.grid.to_string());
            put(&format!("sweep.{i}.domain_nmi"), p.domain_nmi.to_string());
            put(&format!("sweep.{i}.class_nmi"), p.class_nmi.to_string());
        }
        for (i, w) in self.warnings.iter().enumerate() {
            put(&format!("warning.{i}"), w.replace('\n', " "));
        }
        put("wall_ms", self.wall_ms.to_string());
        out
    }

    pub fn from_kv(text: &str) -> Result<Self, HarnessError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| HarnessError::Report(format!("line {}: expected `key = value`", i + 1)))?;
            map.insert(k.to_string(), v.to_string());
        }
        let mut take = |k: &str| map.remove(k);
        fn num<T: std::str::FromStr>(k: &str, v: Option<String>) -> Result<Option<T>, HarnessError> {
            v.map(|v| v.parse().map_err(|_| HarnessError::Report(format!("bad value for {k}: {v:?}"))))
                .transpose()
        }
        let required = |k: &str, v: Option<String>| v.ok_or_else(|| HarnessError::Report(format!("missing {k}")));

        let mode = required("mode", take("mode"))?
            .parse()
            .map_err(HarnessError::Report)?;
        let mut report = RunReport::new(mode, BTreeMap::new());
        report.negative_control = num("negative_control", take("negative_control"))?.unwrap_or(false);
        report.vendor_metrics_csv = take("vendor_metrics_csv").map(PathBuf::from);
        report.client_metrics_csv = take("client_metrics_csv").map(PathBuf::from);
        report.source_accuracy = num("source_accuracy", take("source_accuracy"))?;
        report.vendor_target_accuracy = num("vendor_target_accuracy", take("vendor_target_accuracy"))?;
        report.target_accuracy = num("target_accuracy", take("target_accuracy"))?;
        report.domain_probe_accuracy = num("domain_probe_accuracy", take("domain_probe_accuracy"))?;
        report.a_distance = num("a_distance", take("a_distance"))?;
        let gamma = [
            take("gamma.cls"),
            take("gamma.dom"),
            take("gamma.all"),
            take("gamma.tau"),
            take("gamma.disentangled"),
        ];
        if gamma.iter().any(Option::is_some) {
            let [cls, dom, all, tau, dis] = gamma;
            let req = |k: &str, v: Option<String>| -> Result<f64, HarnessError> {
                num(k, v)?.ok_or_else(|| HarnessError::Report(format!("missing {k}")))
            };
            report.gamma = Some(GammaReport {
                gamma: Gamma {
                    cls: req("gamma.cls", cls)?,
                    dom: req("gamma.dom", dom)?,
                    all: req("gamma.all", all)?,
                },
                tau: req("gamma.tau", tau)?,
                disentangled: num("gamma.disentangled", dis)?
                    .ok_or_else(|| HarnessError::Report("missing gamma.disentangled".into()))?,
            });
        }
        for i in 0.. {
            let Some(grid) = take(&format!("sweep.{i}.grid")) else { break };
            report.sweep.push(SweepPoint {
                grid: num("sweep grid", Some(grid))?.unwrap_or_default(),
                domain_nmi: num("sweep domain_nmi", take(&format!("sweep.{i}.domain_nmi")))?.unwrap_or_default(),
                class_nmi: num("sweep class_nmi", take(&format!("sweep.{i}.class_nmi")))?.unwrap_or_default(),
            });
        }
        for i in 0.. {
            let Some(w) = take(&format!("warning.{i}")) else { break };
            report.warnings.push(w);
        }
        report.wall_ms = num("wall_ms", take("wall_ms"))?.unwrap_or(0);
        let mut config = BTreeMap::new();
        for (k, v) in std::mem::take(&mut map) {
            match k.strip_prefix("config.") {
                Some(key) => {
                    config.insert(key.to_string(), v);
                }
                None => return Err(HarnessError::Report(format!("unknown report key {k:?}"))),
            }
        }
        report.config = config;
        Ok(report)
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
        let _ = writeln!(out, "mode:                   {}", self.mode);
        if self.negative_control {
            let _ = writeln!(out, "negative control:       shuffled inputs fed to the task loss");
        }
        for key in ["seed", "dst_enabled", "dri_enabled", "lambda_pl", "grid"] {
            if let Some(v) = self.config.get(key) {
                let _ = writeln!(out, "{:<24}{v}", format!("{key}:"));
            }
        }
        let _ = writeln!(out, "source accuracy:        {}", pct(self.source_accuracy));
        let _ = writeln!(out, "target accuracy before: {}", pct(self.vendor_target_accuracy));
        let _ = writeln!(out, "target accuracy after:  {}", pct(self.target_accuracy));
        if let Some(g) = &self.gamma {
            let _ = writeln!(
                out,
                "gamma cls/dom/all:      {:.4} / {:.4} / {:.4}  (tau {}, disentangled: {})",
                g.gamma.cls, g.gamma.dom, g.gamma.all, g.tau, g.disentangled
            );
        }
        let _ = writeln!(out, "domain probe accuracy:  {}", pct(self.domain_probe_accuracy));
        if let Some(a) = self.a_distance {
            let _ = writeln!(out, "A-distance:             {a:.4}");
        }
        for p in &self.sweep {
            let _ = writeln!(
                out,
                "grid {:>2}: domain NMI {:.4}, class NMI {:.4}",
                p.grid, p.domain_nmi, p.class_nmi
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        let _ = writeln!(out, "wall time:              {} ms", self.wall_ms);
        out
    }
}

/// Files written by `emit_report`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub summary: PathBuf,
    pub kv: PathBuf,
}

/// Writes `report.txt` and `report.kv` into `dir`. Metrics CSVs are written
/// by the training stages and referenced from the report.
pub fn emit_report(report: &RunReport, dir: impl AsRef<Path>) -> Result<ReportPaths, HarnessError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let paths = ReportPaths {
        summary: dir.join("report.txt"),
        kv: dir.join("report.kv"),
    };
    fs::write(&paths.summary, report.summary())?;
    fs::write(&paths.kv, report.to_kv())?;
    Ok(paths)
}
