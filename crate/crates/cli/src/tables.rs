//! Delimiter-separated output tables.
//!
//! Every row carries a `format_version` column; readers reject other
//! versions. Steps and tasks are 1-based in exported files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use lil_core::eval::{compute_metrics, DriftRecord, Metrics, SuccessTensor};
use lil_core::synth::{Modality, SuiteKind};
use lil_core::trainer::Method;

use crate::error::{CliError, Result};

pub const TABLE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub format_version: u32,
    pub run_id: String,
    pub method: String,
    pub suite: String,
    pub seed: String,
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub format_version: u32,
    pub run_id: String,
    pub method: Method,
    pub suite: SuiteKind,
    pub seed: u64,
    pub step: usize,
    pub task: usize,
    pub epoch: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub format_version: u32,
    pub run_id: String,
    pub method: Method,
    pub suite: SuiteKind,
    pub seed: u64,
    pub step: usize,
    pub modality: String,
    pub drift: f64,
}

/// Labels shared by all rows of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLabel {
    pub run_id: String,
    pub method: Method,
    pub suite: SuiteKind,
    pub seed: u64,
}

impl RunLabel {
    pub fn new(method: Method, suite: SuiteKind, seed: u64) -> Self {
        Self {
            run_id: format!("{}-{}-seed{}", suite.as_str().to_ascii_lowercase(), method, seed),
            method,
            suite,
            seed,
        }
    }

    pub fn metrics_row(&self, m: &Metrics) -> MetricsRow {
        MetricsRow {
            format_version: TABLE_FORMAT_VERSION,
            run_id: self.run_id.clone(),
            method: self.method.to_string(),
            suite: self.suite.to_string(),
            seed: self.seed.to_string(),
            fwt: m.fwt,
            nbt: m.nbt,
            auc: m.auc,
        }
    }

    pub fn success_rows(&self, c: &SuccessTensor) -> Vec<SuccessRow> {
        c.entries()
            .into_iter()
            .map(|(i, j, e, rate)| SuccessRow {
                format_version: TABLE_FORMAT_VERSION,
                run_id: self.run_id.clone(),
                method: self.method,
                suite: self.suite,
                seed: self.seed,
                step: i + 1,
                task: j + 1,
                epoch: c.eval_epochs[e],
                rate,
            })
            .collect()
    }

    pub fn drift_rows(&self, drift: &[DriftRecord]) -> Vec<DriftRow> {
        drift
            .iter()
            .flat_map(|d| {
                Modality::ALL.iter().map(move |&m| DriftRow {
                    format_version: TABLE_FORMAT_VERSION,
                    run_id: self.run_id.clone(),
                    method: self.method,
                    suite: self.suite,
                    seed: self.seed,
                    step: d.step + 1,
                    modality: m.name().to_string(),
                    drift: d.get(m),
                })
            })
            .collect()
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub trait Versioned {
    fn version(&self) -> u32;
}

impl Versioned for MetricsRow {
    fn version(&self) -> u32 {
        self.format_version
    }
}

impl Versioned for SuccessRow {
    fn version(&self) -> u32 {
        self.format_version
    }
}

impl Versioned for DriftRow {
    fn version(&self) -> u32 {
        self.format_version
    }
}

pub fn read_rows<T: DeserializeOwned + Versioned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: T = row.map_err(|e| csv_err(path, e))?;
        if row.version() != TABLE_FORMAT_VERSION {
            return Err(CliError::Data(format!(
                "{}: unsupported format version {} (expected {TABLE_FORMAT_VERSION})",
                path.display(),
                row.version()
            )));
        }
        out.push(row);
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

/// Rebuild a success tensor from its long-format rows.
pub fn tensor_from_rows(k: usize, eval_epochs: &[usize], rows: &[SuccessRow]) -> Result<SuccessTensor> {
    let mut c = SuccessTensor::new(k, eval_epochs.to_vec())?;
    for r in rows {
        let e = eval_epochs.iter().position(|&x| x == r.epoch).ok_or_else(|| {
            CliError::Data(format!("row for epoch {} outside the evaluation schedule", r.epoch))
        })?;
        if r.step == 0 || r.task == 0 {
            return Err(CliError::Data("steps and tasks are 1-based".into()));
        }
        c.set(r.step - 1, r.task - 1, e, r.rate)
            .map_err(|err| CliError::Data(err.to_string()))?;
    }
    if !c.is_complete() {
        return Err(CliError::Data("success table is incomplete".into()));
    }
    Ok(c)
}

pub fn drift_from_rows(rows: &[DriftRow]) -> Result<Vec<DriftRecord>> {
    let mut out: Vec<DriftRecord> = Vec::new();
    for r in rows {
        let m = Modality::ALL
            .iter()
            .position(|m| m.name() == r.modality)
            .ok_or_else(|| CliError::Data(format!("unknown modality {:?}", r.modality)))?;
        let step = r.step.checked_sub(1).ok_or_else(|| CliError::Data("steps are 1-based".into()))?;
        if out.last().map(|d| d.step) != Some(step) {
            out.push(DriftRecord {
                step,
                drift: [0.0; Modality::ALL.len()],
            });
        }
        out.last_mut().expect("pushed").drift[m] = r.drift;
    }
    Ok(out)
}

/// Mean and standard error of the mean (0 for a single value).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-seed rows followed by a mean row and a standard-error row.
pub fn summary_rows(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut out = rows.to_vec();
    if rows.is_empty() {
        return out;
    }
    let col = |f: fn(&MetricsRow) -> f64| mean_se(&rows.iter().map(f).collect::<Vec<_>>());
    let (fwt, fwt_se) = col(|r| r.fwt);
    let (nbt, nbt_se) = col(|r| r.nbt);
    let (auc, auc_se) = col(|r| r.auc);
    let first = &rows[0];
    let same = |f: fn(&MetricsRow) -> &String| {
        if rows.iter().all(|r| f(r) == f(first)) {
            f(first).clone()
        } else {
            "mixed".to_string()
        }
    };
    let method = same(|r| &r.method);
    let suite = same(|r| &r.suite);
    for (id, fwt, nbt, auc) in [("mean", fwt, nbt, auc), ("stderr", fwt_se, nbt_se, auc_se)] {
        out.push(MetricsRow {
            format_version: TABLE_FORMAT_VERSION,
            run_id: id.to_string(),
            method: method.clone(),
            suite: suite.clone(),
            seed: "all".to_string(),
            fwt,
            nbt,
            auc,
        });
    }
    out
}

/// Render metrics rows as an aligned text table, folding each mean/stderr
/// pair into one `mean ± se` line.
pub fn render_summary(rows: &[MetricsRow]) -> String {
    let mut s = format!("{:<28} {:>12} {:>12} {:>12}\n", "run", "FWT", "NBT", "AUC");
    let mut i = 0;
    while i < rows.len() {
        let r = &rows[i];
        match rows.get(i + 1) {
            Some(se) if r.run_id == "mean" && se.run_id == "stderr" => {
                s += &format!(
                    "{:<28} {:>12} {:>12} {:>12}\n",
                    format!("{} mean ± se", r.method),
                    format!("{:.3}±{:.3}", r.fwt, se.fwt),
                    format!("{:.3}±{:.3}", r.nbt, se.nbt),
                    format!("{:.3}±{:.3}", r.auc, se.auc),
                );
                i += 2;
            }
            _ => {
                s += &format!("{:<28} {:>12.3} {:>12.3} {:>12.3}\n", r.run_id, r.fwt, r.nbt, r.auc);
                i += 1;
            }
        }
    }
    s
}

pub fn metrics_of(c: &SuccessTensor) -> Result<Metrics> {
    compute_metrics(c).map_err(|e| CliError::Data(e.to_string()))
}
