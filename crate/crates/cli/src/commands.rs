//! The four subcommands as library functions.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use lil_core::eval::{
    latent_drift, probe_batch, rollout_success, rollout_success_parallel, DriftRecord, GreedyPolicy,
    Metrics, SuccessTensor,
};
use lil_core::io::{
    encode_checkpoint, read_checkpoint, read_suite, read_trajectories, write_suite, write_trajectories,
    Checkpoint,
};
use lil_core::losses::LossBreakdown;
use lil_core::policy::PolicyParams;
use lil_core::synth::{collect_demos, make_suite, Modality, TaskSuite, Trajectory};
use lil_core::trainer::{run_lifelong, Method, TrainEvent};

use crate::config::{ExperimentConfig, ResolvedRun};
use crate::error::{CliError, Result};
use crate::manifest::{
    create_file, CheckpointEntry, MetricFiles, RunLock, RunManifest, WallClock,
    MANIFEST_FORMAT_VERSION,
};
use crate::tables::{
    drift_from_rows, mean_se, metrics_of, read_rows, summary_rows, tensor_from_rows, write_rows,
    DriftRow, MetricsRow, RunLabel, SuccessRow, TABLE_FORMAT_VERSION,
};

pub const SUITE_FILE: &str = "suite.json";
pub const LOG_FORMAT_VERSION: u32 = 1;

pub fn task_file(data_dir: &Path, task_id: usize) -> PathBuf {
    data_dir.join(format!("task_{task_id:02}.jsonl"))
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataSummary {
    pub data_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Generate the suite and expert demonstrations for every task.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<GenDataSummary> {
    cfg.validate()?;
    let dir = cfg.data_dir();
    let suite = make_suite(cfg.suite, cfg.tasks, cfg.suite_seed)?;
    let demos = suite
        .tasks
        .iter()
        .map(|t| collect_demos(t, cfg.demos_per_task, cfg.suite_seed))
        .collect::<lil_core::Result<Vec<_>>>()?;

    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut files = Vec::with_capacity(suite.tasks.len() + 1);
    for (task, trajs) in suite.tasks.iter().zip(&demos) {
        let path = task_file(&dir, task.task_id);
        let tmp = path.with_extension("tmp");
        write_trajectories(&tmp, trajs).map_err(|e| CliError::at(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        files.push(path);
    }
    let suite_path = dir.join(SUITE_FILE);
    let tmp = suite_path.with_extension("tmp");
    write_suite(&tmp, &suite).map_err(|e| CliError::at(&tmp, e))?;
    std::fs::rename(&tmp, &suite_path).map_err(|e| CliError::io(&suite_path, e))?;
    files.push(suite_path);
    Ok(GenDataSummary { data_dir: dir, files })
}

/// Load and check the suite and demonstrations written by [`gen_data`].
pub fn load_data(
    data_dir: &Path,
    run: &ResolvedRun,
) -> Result<(TaskSuite, Vec<Vec<Trajectory>>)> {
    let suite_path = data_dir.join(SUITE_FILE);
    if !suite_path.is_file() {
        return Err(CliError::Data(format!(
            "missing {}; run gen-data first",
            suite_path.display()
        )));
    }
    let suite = read_suite(&suite_path).map_err(|e| CliError::at(&suite_path, e))?;
    if suite.kind != run.suite || suite.seed != run.suite_seed || suite.tasks.len() != run.tasks {
        return Err(CliError::Data(format!(
            "{} holds a {} suite with {} tasks (seed {}), config asks for {} with {} tasks (seed {})",
            suite_path.display(),
            suite.kind,
            suite.tasks.len(),
            suite.seed,
            run.suite,
            run.tasks,
            run.suite_seed
        )));
    }
    let mut demos = Vec::with_capacity(suite.tasks.len());
    for task in &suite.tasks {
        let path = task_file(data_dir, task.task_id);
        if !path.is_file() {
            return Err(CliError::Data(format!("missing demonstration file {}", path.display())));
        }
        let trajs = read_trajectories(&path).map_err(|e| CliError::at(&path, e))?;
        if trajs.len() != run.demos_per_task {
            return Err(CliError::Data(format!(
                "{}: {} demonstrations, expected {}",
                path.display(),
                trajs.len(),
                run.demos_per_task
            )));
        }
        if let Some(t) = trajs.iter().find(|t| t.task_id != task.task_id || !t.success) {
            return Err(CliError::Data(format!(
                "{}: bad demonstration (task {}, success {})",
                path.display(),
                t.task_id,
                t.success
            )));
        }
        demos.push(trajs);
    }
    Ok((suite, demos))
}

// ------------------------------------------------------------------- train

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub format_version: u32,
    /// 1-based incremental step.
    pub step: usize,
    pub epoch: usize,
    pub batches: usize,
    pub loss: LossBreakdown,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub skipped: bool,
    pub metrics: Metrics,
}

fn checkpoint_name(step: usize, epoch: usize) -> String {
    format!("checkpoints/step{:02}_epoch{epoch:03}.ckpt", step + 1)
}

/// Train `method` for every seed of the config; completed runs with an
/// identical config are skipped unless `force`.
pub fn train(cfg: &ExperimentConfig, method: Method, force: bool) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        out.push(train_seed(cfg, method, seed, force)?);
    }
    Ok(out)
}

fn train_seed(cfg: &ExperimentConfig, method: Method, seed: u64, force: bool) -> Result<TrainOutcome> {
    let total = Instant::now();
    let run = cfg.resolve(method, seed);
    let hash = run.hash();
    let run_dir = cfg.run_dir(method, seed);
    let label = RunLabel::new(method, cfg.suite, seed);

    std::fs::create_dir_all(&run_dir).map_err(|e| CliError::io(&run_dir, e))?;
    let _lock = RunLock::acquire(&run_dir)?;
    if !force && RunManifest::path(&run_dir).is_file() {
        let old = RunManifest::read(&run_dir)?;
        if old.config_hash != hash {
            return Err(CliError::Config(format!(
                "{} holds a run with a different config; pass --force to overwrite",
                run_dir.display()
            )));
        }
        if old.complete && old.check_files(&run_dir).is_ok() {
            let rows: Vec<MetricsRow> = read_rows(&run_dir.join(&old.files.metrics))?;
            let r = rows
                .first()
                .ok_or_else(|| CliError::Data(format!("{}: empty metrics table", run_dir.display())))?;
            return Ok(TrainOutcome {
                seed,
                run_dir,
                skipped: true,
                metrics: Metrics { fwt: r.fwt, nbt: r.nbt, auc: r.auc },
            });
        }
    }

    let data_dir = cfg.data_dir();
    let (suite, demos) = load_data(&data_dir, &run)?;
    let ck_dir = run_dir.join("checkpoints");
    if ck_dir.exists() {
        std::fs::remove_dir_all(&ck_dir).map_err(|e| CliError::io(&ck_dir, e))?;
    }
    std::fs::create_dir_all(&ck_dir).map_err(|e| CliError::io(&ck_dir, e))?;

    let files = MetricFiles::default();
    let mut manifest = RunManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash,
        run_id: label.run_id.clone(),
        run: run.clone(),
        data_dir: std::path::absolute(&data_dir).map_err(|e| CliError::io(&data_dir, e))?,
        checkpoints: Vec::new(),
        files: files.clone(),
        wall_clock: WallClock { train_secs: 0.0, total_secs: 0.0 },
        complete: false,
    };
    manifest.write(&run_dir)?;

    let log_path = run_dir.join(&files.train_log);
    let mut log = BufWriter::new(create_file(&log_path)?);
    let mut checkpoints = Vec::new();
    let train_start = Instant::now();
    let report = {
        let mut hook = |ev: TrainEvent<'_>| -> lil_core::Result<()> {
            match ev {
                TrainEvent::Epoch(e) => {
                    let rec = LogRecord {
                        format_version: LOG_FORMAT_VERSION,
                        step: e.step + 1,
                        epoch: e.epoch,
                        batches: e.batches,
                        loss: e.loss,
                        wall_secs: e.wall_secs,
                    };
                    serde_json::to_writer(&mut log, &rec)?;
                    log.write_all(b"\n")?;
                }
                TrainEvent::Checkpoint { step, epoch, params } => {
                    let rel = checkpoint_name(step, epoch);
                    let bytes = encode_checkpoint(&Checkpoint { params: params.clone(), step, epoch })?;
                    std::fs::write(run_dir.join(&rel), bytes)?;
                    checkpoints.push(CheckpointEntry { step: step + 1, epoch, path: rel });
                }
                TrainEvent::Batch { .. } => {}
            }
            Ok(())
        };
        run_lifelong(&suite, demos, &cfg.policy, &run.train, &mut hook)?
    };
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let train_secs = train_start.elapsed().as_secs_f64();

    let metrics = metrics_of(&report.success)?;
    write_rows(&run_dir.join(&files.metrics), &[label.metrics_row(&metrics)])?;
    write_rows(&run_dir.join(&files.success), &label.success_rows(&report.success))?;
    write_rows(&run_dir.join(&files.drift), &label.drift_rows(&report.drift))?;

    manifest.checkpoints = checkpoints;
    manifest.wall_clock = WallClock {
        train_secs,
        total_secs: total.elapsed().as_secs_f64(),
    };
    manifest.complete = true;
    manifest.check_files(&run_dir)?;
    manifest.write(&run_dir)?;
    Ok(TrainOutcome {
        seed,
        run_dir,
        skipped: false,
        metrics,
    })
}

// -------------------------------------------------------------------- eval

/// A finished run loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub label: RunLabel,
    pub success: SuccessTensor,
    pub drift: Vec<DriftRecord>,
}

impl LoadedRun {
    pub fn metrics(&self) -> Result<Metrics> {
        metrics_of(&self.success)
    }
}

/// Seed run directories under `path` (or `path` itself if it is one),
/// ordered by seed.
pub fn discover_runs(path: &Path) -> Result<Vec<PathBuf>> {
    if RunManifest::path(path).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::Data(format!("{} is not a run directory", path.display())));
    }
    let mut runs = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| CliError::io(path, e))? {
        let p = entry.map_err(|e| CliError::io(path, e))?.path();
        if RunManifest::path(&p).is_file() {
            runs.push(p);
        }
    }
    if runs.is_empty() {
        return Err(CliError::Data(format!("no runs found under {}", path.display())));
    }
    let mut keyed = runs
        .into_iter()
        .map(|p| Ok((RunManifest::read(&p)?.run.train.seed, p)))
        .collect::<Result<Vec<_>>>()?;
    keyed.sort();
    Ok(keyed.into_iter().map(|(_, p)| p).collect())
}

fn load_manifest(dir: &Path) -> Result<(RunManifest, RunLabel)> {
    let m = RunManifest::read(dir)?;
    if !m.complete {
        return Err(CliError::Data(format!("run {} did not finish", dir.display())));
    }
    m.check_files(dir)?;
    let label = RunLabel::new(m.run.train.method, m.run.suite, m.run.train.seed);
    Ok((m, label))
}

/// Read the tables a run saved during training.
pub fn load_saved(dir: &Path) -> Result<LoadedRun> {
    let (manifest, label) = load_manifest(dir)?;
    let rows: Vec<SuccessRow> = read_rows(&dir.join(&manifest.files.success))?;
    let success = tensor_from_rows(manifest.run.tasks, &manifest.run.train.eval_epochs, &rows)?;
    let drift_rows: Vec<DriftRow> = read_rows(&dir.join(&manifest.files.drift))?;
    let drift = drift_from_rows(&drift_rows)?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        label,
        success,
        drift,
    })
}

fn load_params(dir: &Path, entry: &CheckpointEntry) -> Result<PolicyParams> {
    let path = dir.join(&entry.path);
    let ck = read_checkpoint(&path).map_err(|e| match e {
        lil_core::Error::Io(source) => CliError::io(&path, source),
        other => CliError::Data(format!("corrupt checkpoint {}: {other}", path.display())),
    })?;
    if ck.step + 1 != entry.step || ck.epoch != entry.epoch {
        return Err(CliError::Data(format!(
            "corrupt checkpoint {}: header says step {} epoch {}",
            path.display(),
            ck.step + 1,
            ck.epoch
        )));
    }
    Ok(ck.params)
}

/// Re-run every evaluation from the saved checkpoints.
pub fn recompute(dir: &Path) -> Result<LoadedRun> {
    let (manifest, label) = load_manifest(dir)?;
    let run = &manifest.run;
    let (suite, demos) = load_data(&manifest.data_dir, run)?;
    let t = &run.train;
    let mut success = SuccessTensor::new(run.tasks, t.eval_epochs.clone())?;
    let mut finals: Vec<Option<PolicyParams>> = vec![None; run.tasks];
    for entry in &manifest.checkpoints {
        let step = entry.step - 1;
        let e = t.eval_epochs.iter().position(|&x| x == entry.epoch).ok_or_else(|| {
            CliError::Data(format!("checkpoint {} outside the evaluation schedule", entry.path))
        })?;
        let params = load_params(dir, entry)?;
        let policy = GreedyPolicy(&params);
        for task in suite.tasks.iter().take(step + 1) {
            let rate = if t.parallel_eval {
                rollout_success_parallel(&policy, task, t.eval_episodes, t.seed)?
            } else {
                rollout_success(&policy, task, t.eval_episodes, t.seed)?
            };
            success.set(step, task.task_id, e, rate)?;
        }
        if entry.epoch == t.epochs {
            finals[step] = Some(params);
        }
    }
    if !success.is_complete() {
        return Err(CliError::Data(format!("{}: checkpoints do not cover the schedule", dir.display())));
    }

    let drift = if finals.iter().all(Option::is_some) {
        let probe = probe_batch(&demos[0])?;
        finals
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (prev, cur) = (w[0].as_ref().expect("checked"), w[1].as_ref().expect("checked"));
                latent_drift(cur, prev, &probe, i + 1)
            })
            .collect::<lil_core::Result<Vec<_>>>()?
    } else {
        // Final weights were not checkpointed; fall back to the saved drift.
        let rows: Vec<DriftRow> = read_rows(&dir.join(&manifest.files.drift))?;
        drift_from_rows(&rows)?
    };
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        label,
        success,
        drift,
    })
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub runs: Vec<LoadedRun>,
    /// Per-seed rows followed by mean and standard-error rows.
    pub summary: Vec<MetricsRow>,
    pub files: Vec<PathBuf>,
}

pub const EVAL_SUMMARY: &str = "eval_summary.csv";
pub const EVAL_SUCCESS: &str = "eval_success.csv";
pub const EVAL_DRIFT: &str = "eval_drift.csv";

/// Load (or recompute) every run under `path` and write summary tables into
/// `out` (default: `path`).
pub fn eval(path: &Path, recompute_from_checkpoints: bool, out: Option<&Path>) -> Result<EvalReport> {
    let dirs = discover_runs(path)?;
    let runs = dirs
        .iter()
        .map(|d| if recompute_from_checkpoints { recompute(d) } else { load_saved(d) })
        .collect::<Result<Vec<_>>>()?;
    let per_seed = runs
        .iter()
        .map(|r| Ok(r.label.metrics_row(&r.metrics()?)))
        .collect::<Result<Vec<_>>>()?;
    let summary = summary_rows(&per_seed);

    let out = out.unwrap_or(path);
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let files = vec![out.join(EVAL_SUMMARY), out.join(EVAL_SUCCESS), out.join(EVAL_DRIFT)];
    write_rows(&files[0], &summary)?;
    let success: Vec<SuccessRow> = runs.iter().flat_map(|r| r.label.success_rows(&r.success)).collect();
    write_rows(&files[1], &success)?;
    let drift: Vec<DriftRow> = runs.iter().flat_map(|r| r.label.drift_rows(&r.drift)).collect();
    write_rows(&files[2], &drift)?;
    Ok(EvalReport { runs, summary, files })
}

// ------------------------------------------------------------------ report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub format_version: u32,
    pub method: Method,
    /// 1-based incremental step.
    pub step: usize,
    /// 1-based task index, or `avg` for the mean over tasks seen so far.
    pub task: String,
    pub mean: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftCurveRow {
    pub format_version: u32,
    pub method: Method,
    pub step: usize,
    pub modality: String,
    pub mean: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

pub const REPORT_COMPARISON: &str = "comparison.csv";
pub const REPORT_SUCCESS_LONG: &str = "success_long.csv";
pub const REPORT_DRIFT_LONG: &str = "drift_long.csv";
pub const REPORT_SUCCESS_CURVES: &str = "success_curves.csv";
pub const REPORT_DRIFT_CURVES: &str = "drift_curves.csv";

#[derive(Clone, Debug)]
pub struct Report {
    /// Per method: per-seed rows, then mean and standard-error rows.
    pub comparison: Vec<MetricsRow>,
    pub curves: Vec<CurveRow>,
    pub drift_curves: Vec<DriftCurveRow>,
    pub files: Vec<PathBuf>,
}

/// Compare runs of several methods on one suite and export plot-ready series.
pub fn report(paths: &[PathBuf], out: &Path) -> Result<Report> {
    if paths.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for p in paths {
        for d in discover_runs(p)? {
            runs.push(load_saved(&d)?);
        }
    }
    let first = &runs[0].manifest.run;
    let key = (first.suite, first.tasks, first.suite_seed);
    if let Some(r) = runs
        .iter()
        .find(|r| (r.manifest.run.suite, r.manifest.run.tasks, r.manifest.run.suite_seed) != key)
    {
        let m = &r.manifest.run;
        return Err(CliError::Config(format!(
            "mismatched suites: {} K={} seed {} vs {} K={} seed {} ({})",
            key.0,
            key.1,
            key.2,
            m.suite,
            m.tasks,
            m.suite_seed,
            r.dir.display()
        )));
    }
    let k = key.1;

    let mut by_method: BTreeMap<Method, Vec<&LoadedRun>> = BTreeMap::new();
    for r in &runs {
        by_method.entry(r.label.method).or_default().push(r);
    }
    for group in by_method.values_mut() {
        group.sort_by_key(|r| r.label.seed);
        if group.windows(2).any(|w| w[0].label.seed == w[1].label.seed) {
            return Err(CliError::Config(format!(
                "seed {} of {} given twice",
                group[0].label.seed, group[0].label.method
            )));
        }
    }

    let mut comparison = Vec::new();
    let mut curves = Vec::new();
    let mut drift_curves = Vec::new();
    for (&method, group) in &by_method {
        let rows = group
            .iter()
            .map(|r| Ok(r.label.metrics_row(&r.metrics()?)))
            .collect::<Result<Vec<_>>>()?;
        comparison.extend(summary_rows(&rows));

        for step in 0..k {
            let mut avg = Vec::with_capacity(group.len());
            for task in 0..=step {
                let vals: Vec<f64> = group.iter().map(|r| final_rate(&r.success, step, task)).collect();
                let (mean, stderr) = mean_se(&vals);
                curves.push(CurveRow {
                    format_version: TABLE_FORMAT_VERSION,
                    method,
                    step: step + 1,
                    task: (task + 1).to_string(),
                    mean,
                    stderr,
                    n_seeds: vals.len(),
                });
            }
            for r in group {
                avg.push((0..=step).map(|j| final_rate(&r.success, step, j)).sum::<f64>() / (step + 1) as f64);
            }
            let (mean, stderr) = mean_se(&avg);
            curves.push(CurveRow {
                format_version: TABLE_FORMAT_VERSION,
                method,
                step: step + 1,
                task: "avg".into(),
                mean,
                stderr,
                n_seeds: avg.len(),
            });
        }

        for step in 1..k {
            for m in Modality::ALL {
                let vals: Vec<f64> = group
                    .iter()
                    .filter_map(|r| r.drift.iter().find(|d| d.step == step).map(|d| d.get(m)))
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let (mean, stderr) = mean_se(&vals);
                drift_curves.push(DriftCurveRow {
                    format_version: TABLE_FORMAT_VERSION,
                    method,
                    step: step + 1,
                    modality: m.name().to_string(),
                    mean,
                    stderr,
                    n_seeds: vals.len(),
                });
            }
        }
    }

    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let files: Vec<PathBuf> = [
        REPORT_COMPARISON,
        REPORT_SUCCESS_LONG,
        REPORT_DRIFT_LONG,
        REPORT_SUCCESS_CURVES,
        REPORT_DRIFT_CURVES,
    ]
    .iter()
    .map(|f| out.join(f))
    .collect();
    write_rows(&files[0], &comparison)?;
    let success: Vec<SuccessRow> = runs.iter().flat_map(|r| r.label.success_rows(&r.success)).collect();
    write_rows(&files[1], &success)?;
    let drift: Vec<DriftRow> = runs.iter().flat_map(|r| r.label.drift_rows(&r.drift)).collect();
    write_rows(&files[2], &drift)?;
    write_rows(&files[3], &curves)?;
    write_rows(&files[4], &drift_curves)?;
    Ok(Report {
        comparison,
        curves,
        drift_curves,
        files,
    })
}

/// Success on `task` after training step `step`, at the last evaluation epoch.
fn final_rate(c: &SuccessTensor, step: usize, task: usize) -> f64 {
    c.get(step, task, c.eval_epochs.len() - 1).expect("complete tensor")
}

