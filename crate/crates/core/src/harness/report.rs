//! Versioned JSON reports, flat CSV tables and run comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result, RtkError};
use crate::generator::MmdRow;
use crate::harness::config::RunConfig;
use crate::metrics::PfidCell;

pub const REPORT_SCHEMA: &str = "rtk_report_v1";

/// SHA-256 over the canonical JSON encoding of the full run config, seeds
/// included.
pub fn fingerprint(config: &RunConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("run config serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Results of one trained or evaluated variant inside a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub pfid_cells: Vec<PfidCell>,
    #[serde(default)]
    pub mmd_rows: Vec<MmdRow>,
}

impl RunResult {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            ..Default::default()
        }
    }

    pub fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub name: String,
    pub fingerprint: String,
    pub runs: Vec<RunResult>,
}

impl Report {
    pub fn new(name: impl Into<String>, config: &RunConfig) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            name: name.into(),
            fingerprint: fingerprint(config),
            runs: Vec::new(),
        }
    }

    pub fn run(&self, label: &str) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.label == label)
    }

    fn check_finite(&self) -> Result<()> {
        for r in &self.runs {
            let values = r
                .metrics
                .values()
                .chain(r.pfid_cells.iter().map(|c| &c.fid))
                .chain(r.mmd_rows.iter().map(|m| &m.mmd));
            if values.into_iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("run `{}` holds a non-finite value", r.label)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.check_finite()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Report = serde_json::from_str(text)?;
        if report.schema != REPORT_SCHEMA {
            return Err(RtkError::Format(format!("unsupported report schema `{}`", report.schema)));
        }
        Ok(report)
    }
}

#[derive(Serialize)]
struct CellRow<'a> {
    run: &'a str,
    alpha: f64,
    delta_base: usize,
    delta_eff: usize,
    fid: f64,
}

#[derive(Serialize)]
struct MetricRow<'a> {
    run: &'a str,
    metric: &'a str,
    value: f64,
}

#[derive(Serialize)]
struct MmdCsvRow<'a> {
    run: &'a str,
    alpha: f64,
    mmd: f64,
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub cells_csv: PathBuf,
    pub metrics_csv: PathBuf,
    pub mmd_csv: PathBuf,
}

/// Writes `<name>.json`, `<name>_pfid.csv` (run, alpha, delta_base,
/// delta_eff, fid), `<name>_metrics.csv` and `<name>_mmd.csv` into `dir`.
/// CSV files always carry a header, even with zero rows.
pub fn emit_report(report: &Report, dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir)?;
    let files = ReportFiles {
        json: dir.join(format!("{}.json", report.name)),
        cells_csv: dir.join(format!("{}_pfid.csv", report.name)),
        metrics_csv: dir.join(format!("{}_metrics.csv", report.name)),
        mmd_csv: dir.join(format!("{}_mmd.csv", report.name)),
    };
    fs::write(&files.json, report.to_json()?)?;

    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&files.cells_csv)?;
    w.write_record(["run", "alpha", "delta_base", "delta_eff", "fid"])?;
    for r in &report.runs {
        for c in &r.pfid_cells {
            w.serialize(CellRow {
                run: &r.label,
                alpha: c.alpha,
                delta_base: c.delta_base,
                delta_eff: c.delta_eff,
                fid: c.fid,
            })?;
        }
    }
    w.flush()?;

    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&files.metrics_csv)?;
    w.write_record(["run", "metric", "value"])?;
    for r in &report.runs {
        for (metric, value) in &r.metrics {
            w.serialize(MetricRow {
                run: &r.label,
                metric,
                value: *value,
            })?;
        }
    }
    w.flush()?;

    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&files.mmd_csv)?;
    w.write_record(["run", "alpha", "mmd"])?;
    for r in &report.runs {
        for m in &r.mmd_rows {
            w.serialize(MmdCsvRow {
                run: &r.label,
                alpha: m.alpha,
                mmd: m.mmd,
            })?;
        }
    }
    w.flush()?;
    Ok(files)
}

pub fn read_report(path: &Path) -> Result<Report> {
    Report::from_json(&fs::read_to_string(path)?)
}

/// One metric present in both compared reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub run: String,
    pub metric: String,
    pub left: f64,
    pub right: f64,
}

impl MetricDelta {
    pub fn difference(&self) -> f64 {
        self.right - self.left
    }
}

/// Pairs up metrics of runs with matching labels. Refuses reports whose
/// config fingerprints differ.
pub fn compare_reports(left: &Report, right: &Report) -> Result<Vec<MetricDelta>> {
    if left.fingerprint != right.fingerprint {
        return Err(RtkError::FingerprintMismatch {
            left: left.fingerprint.clone(),
            right: right.fingerprint.clone(),
        });
    }
    let mut out = Vec::new();
    for l in &left.runs {
        let Some(r) = right.run(&l.label) else { continue };
        for (metric, lv) in &l.metrics {
            if let Some(rv) = r.metrics.get(metric) {
                out.push(MetricDelta {
                    run: l.label.clone(),
                    metric: metric.clone(),
                    left: *lv,
                    right: *rv,
                });
            }
        }
    }
    Ok(out)
}
