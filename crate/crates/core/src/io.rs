//! Persistence for trajectories, suites and policy checkpoints.
//!
//! Trajectory files hold one JSON record per line. Checkpoints are binary:
//!
//! ```text
//! magic "LILCKPT\0" | u32 version | u32 header_len | header JSON
//! | u32 n_tensors | per tensor: u32 name_len, name, u32 ndim, u64 dims…, f64 data…
//! ```
//!
//! All integers and floats are little-endian; floats round-trip bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, PolicyParams};
use crate::synth::{Action, MultiModalObs, SuiteKind, TaskSuite, TrajStep, Trajectory};
use crate::tensor::Tensor;

pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;
pub const SUITE_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LILCKPT\0";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    format_version: u32,
    task_id: usize,
    suite_kind: SuiteKind,
    success: bool,
    /// One flat observation per step.
    obs: Vec<Vec<f64>>,
    actions: Vec<[f64; 3]>,
}

fn check_version(found: u32, expected: u32) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Version { found, expected })
    }
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trajs {
        let rec = TrajectoryRecord {
            format_version: TRAJECTORY_FORMAT_VERSION,
            task_id: t.task_id,
            suite_kind: t.kind,
            success: t.success,
            obs: t.steps.iter().map(|s| s.obs.to_flat()).collect(),
            actions: t.steps.iter().map(|s| s.action.to_array()).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = |e: String| Error::Format(format!("{}:{}: {e}", path.display(), n + 1));
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| ctx(e.to_string()))?;
        check_version(rec.format_version, TRAJECTORY_FORMAT_VERSION)?;
        if rec.obs.len() != rec.actions.len() {
            return Err(ctx("observation and action counts differ".into()));
        }
        let steps = rec
            .obs
            .iter()
            .zip(&rec.actions)
            .map(|(o, a)| {
                Ok(TrajStep {
                    obs: MultiModalObs::from_flat(o)?,
                    action: Action::from_slice(a)?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| ctx(e.to_string()))?;
        out.push(Trajectory {
            task_id: rec.task_id,
            kind: rec.suite_kind,
            steps,
            success: rec.success,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteFile {
    format_version: u32,
    suite: TaskSuite,
}

pub fn write_suite(path: &Path, suite: &TaskSuite) -> Result<()> {
    let f = SuiteFile {
        format_version: SUITE_FORMAT_VERSION,
        suite: suite.clone(),
    };
    let mut s = serde_json::to_string_pretty(&f)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_suite(path: &Path) -> Result<TaskSuite> {
    let f: SuiteFile = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    check_version(f.format_version, SUITE_FORMAT_VERSION)?;
    Ok(f.suite)
}

/// Policy weights with the training position they were saved at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub step: usize,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: PolicyConfig,
    step: usize,
    epoch: usize,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: ck.params.config.clone(),
        step: ck.step,
        epoch: ck.epoch,
    })?;
    let mut b = Vec::with_capacity(64 + header.len() + ck.params.param_count() * 8);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    b.extend_from_slice(&(header.len() as u32).to_le_bytes());
    b.extend_from_slice(&header);
    b.extend_from_slice(&(ck.params.tensors.len() as u32).to_le_bytes());
    for (name, t) in ck.params.names.iter().zip(&ck.params.tensors) {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(b)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    check_version(c.u32()?, CHECKPOINT_FORMAT_VERSION)?;
    let hlen = c.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(c.take(hlen)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let n = c.u32()? as usize;
    let mut names = Vec::with_capacity(n);
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = c.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", buf.len() - c.pos)));
    }
    let params = PolicyParams {
        config: header.config,
        names,
        tensors,
    };
    params.validate()?;
    Ok(Checkpoint {
        params,
        step: header.step,
        epoch: header.epoch,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
