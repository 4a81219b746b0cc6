//! Run manifests and run-directory locks.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ResolvedRun;
use crate::error::{CliError, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    /// 1-based incremental step.
    pub step: usize,
    pub epoch: usize,
    /// Relative to the run directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallClock {
    pub train_secs: f64,
    pub total_secs: f64,
}

/// Paths of the files a finished run produced, relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricFiles {
    pub metrics: String,
    pub success: String,
    pub drift: String,
    pub train_log: String,
}

impl Default for MetricFiles {
    fn default() -> Self {
        Self {
            metrics: "metrics.csv".into(),
            success: "success.csv".into(),
            drift: "drift.csv".into(),
            train_log: "train_log.jsonl".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    pub run_id: String,
    pub run: ResolvedRun,
    /// Directory holding the suite description and demonstration files.
    pub data_dir: PathBuf,
    pub checkpoints: Vec<CheckpointEntry>,
    pub files: MetricFiles,
    pub wall_clock: WallClock,
    pub complete: bool,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        write_atomic(&path, text.as_bytes())
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let found = v.get("format_version").and_then(serde_json::Value::as_u64);
        if found != Some(u64::from(MANIFEST_FORMAT_VERSION)) {
            return Err(CliError::Data(format!(
                "{}: unsupported manifest version {found:?} (expected {MANIFEST_FORMAT_VERSION})",
                path.display()
            )));
        }
        serde_json::from_value(v).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Every file the manifest references, as absolute paths.
    pub fn referenced_files(&self, run_dir: &Path) -> Vec<PathBuf> {
        let f = &self.files;
        [&f.metrics, &f.success, &f.drift, &f.train_log]
            .into_iter()
            .chain(self.checkpoints.iter().map(|c| &c.path))
            .map(|p| run_dir.join(p))
            .collect()
    }

    pub fn check_files(&self, run_dir: &Path) -> Result<()> {
        for p in self.referenced_files(run_dir) {
            if !p.is_file() {
                return Err(CliError::Data(format!("manifest references missing file {}", p.display())));
            }
        }
        Ok(())
    }
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Exclusive ownership of a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| CliError::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(run_dir.to_path_buf()))
            }
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn create_file(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| CliError::io(path, e))
}
