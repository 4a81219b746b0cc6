//! Success-rate rollouts, lifelong transfer metrics and latent drift.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{encode_values, policy_forward, ObsBatch, PolicyParams, N_MODALITIES};
use crate::seed::derive_seed;
use crate::synth::{run_episode, Action, Modality, SimState, TaskSpec, Trajectory, OBS_DIM};

/// Anything that maps an observation history to an action.
pub trait Controller: Sync {
    fn act(&self, task: &TaskSpec, state: &SimState, history: &[crate::synth::MultiModalObs]) -> Result<Action>;
}

/// Deterministic policy evaluation: the dominant component's mean.
pub struct GreedyPolicy<'a>(pub &'a PolicyParams);

impl Controller for GreedyPolicy<'_> {
    fn act(&self, _: &TaskSpec, _: &SimState, history: &[crate::synth::MultiModalObs]) -> Result<Action> {
        Action::from_slice(&policy_forward(self.0, history)?.mode_action())
    }
}

pub struct ExpertPolicy;

impl Controller for ExpertPolicy {
    fn act(&self, task: &TaskSpec, state: &SimState, _: &[crate::synth::MultiModalObs]) -> Result<Action> {
        Ok(crate::synth::scripted_expert(task, state))
    }
}

pub fn episode_seed(seed: u64, task_id: usize, episode: usize) -> u64 {
    derive_seed(&[seed, task_id as u64, episode as u64])
}

fn episode_success<C: Controller + ?Sized>(c: &C, task: &TaskSpec, seed: u64, e: usize) -> Result<bool> {
    let (traj, _) = run_episode(task, episode_seed(seed, task.task_id, e), |s, h| c.act(task, s, h))?;
    Ok(traj.success)
}

/// Fraction of `m` episodes that reach the goal. Episode `e` starts from
/// `reset(task, episode_seed(seed, task_id, e))`.
pub fn rollout_success<C: Controller + ?Sized>(c: &C, task: &TaskSpec, m: usize, seed: u64) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let mut wins = 0;
    for e in 0..m {
        wins += episode_success(c, task, seed, e)? as usize;
    }
    Ok(wins as f64 / m as f64)
}

/// [`rollout_success`] with episodes spread over the rayon pool.
pub fn rollout_success_parallel<C: Controller + ?Sized>(c: &C, task: &TaskSpec, m: usize, seed: u64) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let wins = (0..m)
        .into_par_iter()
        .map(|e| episode_success(c, task, seed, e))
        .collect::<Result<Vec<bool>>>()?;
    Ok(wins.iter().filter(|&&w| w).count() as f64 / m as f64)
}

/// `c[i][j][e]` for `j ≤ i`, checkpoints in `eval_epochs` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessTensor {
    pub k: usize,
    pub eval_epochs: Vec<usize>,
    /// `rates[i][j][e]`; `None` until filled.
    rates: Vec<Vec<Vec<Option<f64>>>>,
}

impl SuccessTensor {
    pub fn new(k: usize, eval_epochs: Vec<usize>) -> Result<Self> {
        if k == 0 || eval_epochs.is_empty() {
            return Err(Error::InvalidArgument("success tensor needs K ≥ 1 and at least one epoch".into()));
        }
        let e = eval_epochs.len();
        Ok(Self {
            k,
            eval_epochs,
            rates: (0..k).map(|i| vec![vec![None; e]; i + 1]).collect(),
        })
    }

    fn check(&self, i: usize, j: usize, e: usize) -> Result<()> {
        if i >= self.k || j > i || e >= self.eval_epochs.len() {
            return Err(Error::IncompleteTensor(format!(
                "entry ({i}, {j}, {e}) outside K = {}, |E| = {}",
                self.k,
                self.eval_epochs.len()
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, i: usize, j: usize, e: usize, rate: f64) -> Result<()> {
        self.check(i, j, e)?;
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("success rate {rate} outside [0, 1]")));
        }
        self.rates[i][j][e] = Some(rate);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize, e: usize) -> Option<f64> {
        self.check(i, j, e).ok()?;
        self.rates[i][j][e]
    }

    pub fn is_complete(&self) -> bool {
        self.rates.iter().flatten().flatten().all(Option::is_some)
    }

    /// Filled entries as `(i, j, e index, rate)`.
    pub fn entries(&self) -> Vec<(usize, usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, row) in self.rates.iter().enumerate() {
            for (j, col) in row.iter().enumerate() {
                for (e, r) in col.iter().enumerate() {
                    if let Some(r) = r {
                        out.push((i, j, e, *r));
                    }
                }
            }
        }
        out
    }

    fn at(&self, i: usize, j: usize, e: usize) -> Result<f64> {
        self.get(i, j, e)
            .ok_or_else(|| Error::IncompleteTensor(format!("missing entry ({i}, {j}, {e})")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
}

/// Forward transfer, negative backward transfer and AUC.
///
/// `NBT` averages over `k < K` and is 0 when `K = 1`.
pub fn compute_metrics(c: &SuccessTensor) -> Result<Metrics> {
    if !c.is_complete() {
        return Err(Error::IncompleteTensor("not every (i, j ≤ i, e) entry is filled".into()));
    }
    let k = c.k;
    let ne = c.eval_epochs.len();
    let last = ne - 1;
    let (mut fwt, mut nbt, mut auc) = (0.0, 0.0, 0.0);
    for j in 0..k {
        let own: Vec<f64> = (0..ne).map(|e| c.at(j, j, e)).collect::<Result<_>>()?;
        let fwt_j = own.iter().sum::<f64>() / ne as f64;
        let best = own.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let later: Vec<f64> = (j + 1..k).map(|i| c.at(i, j, last)).collect::<Result<_>>()?;
        if !later.is_empty() {
            nbt += later.iter().map(|r| best - r).sum::<f64>() / later.len() as f64;
        }
        auc += (fwt_j + later.iter().sum::<f64>()) / (later.len() + 1) as f64;
        fwt += fwt_j;
    }
    Ok(Metrics {
        fwt: fwt / k as f64,
        nbt: if k > 1 { nbt / (k - 1) as f64 } else { 0.0 },
        auc: auc / k as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    /// Index of the newer policy's task.
    pub step: usize,
    /// Mean squared latent displacement per modality, in [`Modality::ALL`] order.
    pub drift: [f64; N_MODALITIES],
}

impl DriftRecord {
    pub fn get(&self, m: Modality) -> f64 {
        self.drift[Modality::ALL.iter().position(|&x| x == m).expect("modality")]
    }
}

/// Every probe timestep as a length-1 window, flattened.
pub fn probe_batch(probe: &[Trajectory]) -> Result<ObsBatch> {
    let mut data = Vec::new();
    for t in probe {
        for s in &t.steps {
            data.extend(s.obs.to_flat());
        }
    }
    let n = data.len() / OBS_DIM;
    ObsBatch::new(n, 1, data)
}

/// Mean over probe timesteps of `‖z_k − z_prev‖²`, per modality.
pub fn latent_drift(k: &PolicyParams, prev: &PolicyParams, probe: &ObsBatch, step: usize) -> Result<DriftRecord> {
    if k.config != prev.config {
        return Err(Error::InvalidArgument("drift needs policies with the same config".into()));
    }
    let a = encode_values(k, probe)?;
    let b = encode_values(prev, probe)?;
    let rows = probe.rows() as f64;
    let mut drift = [0.0; N_MODALITIES];
    for (d, (x, y)) in drift.iter_mut().zip(a.iter().zip(&b)) {
        *d = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / rows;
    }
    Ok(DriftRecord { step, drift })
}
