//! Sequential training over a task suite with optional replay and
//! distillation from the previous step's policy.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, Tape};
use crate::error::{Error, Result};
use crate::eval::{latent_drift, probe_batch, rollout_success, DriftRecord, GreedyPolicy, SuccessTensor};
use crate::losses::{total_loss_with_teacher, teacher_outputs, Batch, KlNoise, LossBreakdown, LossWeights};
use crate::policy::{init_params, ObsBatch, PolicyConfig, PolicyParams};
use crate::seed::{derive_seed, rng_from, Rng};
use crate::synth::{SuiteKind, TaskSuite, Trajectory, ACTION_DIM, OBS_DIM};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sequential,
    Er,
    M2distill,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sequential => "sequential",
            Method::Er => "er",
            Method::M2distill => "m2distill",
        }
    }

    pub fn uses_replay(self) -> bool {
        self != Method::Sequential
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sequential" => Ok(Method::Sequential),
            "er" => Ok(Method::Er),
            "m2distill" => Ok(Method::M2distill),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Default distillation weights for a suite kind.
pub fn lambda_preset(kind: SuiteKind) -> LossWeights {
    let strong = match kind {
        SuiteKind::Goal => 0.25,
        SuiteKind::Object | SuiteKind::Spatial => 0.05,
    };
    LossWeights {
        lambda_i: strong,
        lambda_t: 0.05,
        lambda_e: 0.05,
        lambda_p: strong,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub kl_samples: usize,
    pub eval_epochs: Vec<usize>,
    pub eval_episodes: usize,
    pub mix_ratio: f64,
    pub replay_capacity: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Run evaluation episodes on the rayon pool.
    pub parallel_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::M2distill,
            epochs: 50,
            batch_size: 16,
            lr: 3e-3,
            weights: lambda_preset(SuiteKind::Object),
            kl_samples: 16,
            eval_epochs: vec![10, 20, 30, 40, 50],
            eval_episodes: 20,
            mix_ratio: 0.5,
            replay_capacity: 1000,
            grad_clip: 10.0,
            seed: 0,
            parallel_eval: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.kl_samples == 0 || self.eval_episodes == 0 {
            return bad("epochs, batch_size, kl_samples and eval_episodes must be positive".into());
        }
        if self.eval_epochs.is_empty() {
            return bad("eval_epochs must not be empty".into());
        }
        if self.eval_epochs.windows(2).any(|w| w[0] >= w[1]) || self.eval_epochs[0] == 0 {
            return bad("eval_epochs must be strictly increasing and positive".into());
        }
        if *self.eval_epochs.last().expect("nonempty") > self.epochs {
            return bad(format!("epochs {} < max eval epoch", self.epochs));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad(format!("mix_ratio {} outside [0, 1]", self.mix_ratio));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("lr and grad_clip must be positive".into());
        }
        Ok(())
    }

    /// Weights after applying the method: only M2DISTILL distills.
    pub fn effective_weights(&self) -> LossWeights {
        match self.method {
            Method::M2distill => self.weights,
            _ => LossWeights::ZERO,
        }
    }
}

/// A trajectory stored as flat arrays for fast window extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatTrajectory {
    pub task_id: usize,
    /// `[T, OBS_DIM]`.
    pub obs: Vec<f64>,
    /// `[T, ACTION_DIM]`.
    pub actions: Vec<f64>,
}

impl FlatTrajectory {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        let mut obs = Vec::with_capacity(t.steps.len() * OBS_DIM);
        let mut actions = Vec::with_capacity(t.steps.len() * ACTION_DIM);
        for s in &t.steps {
            obs.extend(s.obs.to_flat());
            actions.extend(s.action.to_array());
        }
        Self {
            task_id: t.task_id,
            obs,
            actions,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len() / ACTION_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Appends the length-`l` window ending at step `t` (left-padded with
    /// step 0) and its action target.
    fn push_window(&self, t: usize, l: usize, obs: &mut Vec<f64>, actions: &mut Vec<f64>) {
        for s in 0..l {
            let src = (t + s + 1).saturating_sub(l);
            obs.extend_from_slice(&self.obs[src * OBS_DIM..(src + 1) * OBS_DIM]);
        }
        actions.extend_from_slice(&self.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]);
    }
}

/// One task's demonstrations with a `(trajectory, step)` window index.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub trajectories: Vec<FlatTrajectory>,
    windows: Vec<(usize, usize)>,
}

impl TaskData {
    pub fn new(trajectories: Vec<FlatTrajectory>) -> Result<Self> {
        let windows: Vec<(usize, usize)> = trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
            .collect();
        if windows.is_empty() {
            return Err(Error::InvalidArgument("task data has no steps".into()));
        }
        Ok(Self { trajectories, windows })
    }

    pub fn from_trajectories(ts: &[Trajectory]) -> Result<Self> {
        Self::new(ts.iter().map(FlatTrajectory::from_trajectory).collect())
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }
}

/// Capped per-task store of past demonstrations.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<T = FlatTrajectory> {
    pub capacity: usize,
    tasks: BTreeMap<usize, Vec<T>>,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            tasks: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.tasks.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn counts(&self) -> BTreeMap<usize, usize> {
        self.tasks.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    pub fn task(&self, id: usize) -> &[T] {
        self.tasks.get(&id).map_or(&[], Vec::as_slice)
    }

    /// Task ids with at least one stored trajectory.
    pub fn task_ids(&self) -> Vec<usize> {
        self.tasks.iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| *k).collect()
    }

    /// Appends `items` to `task_id`, then evicts uniformly random
    /// trajectories from the fullest task (lowest id on ties) until the
    /// total fits. Returns the number evicted.
    pub fn push(&mut self, task_id: usize, items: Vec<T>, rng: &mut Rng) -> usize {
        self.tasks.entry(task_id).or_default().extend(items);
        let mut evicted = 0;
        while self.total() > self.capacity {
            let (&id, _) = self
                .tasks
                .iter()
                .rev()
                .max_by_key(|(_, v)| v.len())
                .expect("nonempty buffer over capacity");
            let v = self.tasks.get_mut(&id).expect("task present");
            let i = rng.random_range(0..v.len());
            v.remove(i);
            evicted += 1;
        }
        evicted
    }
}

/// `⌈ratio·B⌉` current windows plus the rest from the buffer, task chosen
/// uniformly then trajectory and step uniformly. An empty buffer yields an
/// all-current batch.
pub fn sample_batch(
    current: &TaskData,
    buffer: &ReplayBuffer,
    batch_size: usize,
    mix_ratio: f64,
    context_len: usize,
    rng: &mut Rng,
) -> Result<(Batch, Option<Batch>)> {
    let ids = buffer.task_ids();
    let n_cur = if ids.is_empty() {
        batch_size
    } else {
        ((mix_ratio * batch_size as f64).ceil() as usize).min(batch_size)
    };
    let mut obs = Vec::with_capacity(n_cur * context_len * OBS_DIM);
    let mut act = Vec::with_capacity(n_cur * ACTION_DIM);
    for _ in 0..n_cur {
        let (ti, s) = current.windows[rng.random_range(0..current.windows.len())];
        current.trajectories[ti].push_window(s, context_len, &mut obs, &mut act);
    }
    let cur = Batch::new(ObsBatch::new(n_cur.max(1), context_len, obs)?, act)?;
    let n_ex = batch_size - n_cur;
    if ids.is_empty() || n_ex == 0 {
        return Ok((cur, None));
    }
    let mut obs = Vec::with_capacity(n_ex * context_len * OBS_DIM);
    let mut act = Vec::with_capacity(n_ex * ACTION_DIM);
    for _ in 0..n_ex {
        let id = ids[rng.random_range(0..ids.len())];
        let trajs = buffer.task(id);
        let t = &trajs[rng.random_range(0..trajs.len())];
        let s = rng.random_range(0..t.len());
        t.push_window(s, context_len, &mut obs, &mut act);
    }
    let ex = Batch::new(ObsBatch::new(n_ex, context_len, obs)?, act)?;
    Ok((cur, Some(ex)))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Applies one update; parameters without a gradient entry see zero.
    /// Non-finite gradients leave everything untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite { context: "gradient".into() });
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = grads.get(ParamId(i)) {
                if g.shape() != p.shape() {
                    return Err(crate::error::shape_err("adam", format!("gradient {i} shape differs")));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(ParamId(i));
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(g: &mut Gradients, max_norm: f64) -> f64 {
    let n = g.global_norm();
    if n > max_norm {
        g.scale(max_norm / n);
    }
    n
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub step: usize,
    pub epoch: usize,
    pub batches: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub wall_secs: f64,
}

/// Callbacks raised while training.
pub enum TrainEvent<'a> {
    Epoch(&'a EpochLog),
    /// Parameters at an evaluation epoch, after evaluation.
    Checkpoint {
        step: usize,
        epoch: usize,
        params: &'a PolicyParams,
    },
    /// Loss of every optimizer step.
    Batch {
        step: usize,
        epoch: usize,
        batch: usize,
        loss: &'a LossBreakdown,
    },
}

pub type Hook<'a> = dyn FnMut(TrainEvent<'_>) -> Result<()> + 'a;

/// Frozen copy of the policy at the end of step `step`; the distillation
/// target for step `step + 1`.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    params: PolicyParams,
    step: usize,
}

impl TeacherSnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.params.config
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

pub fn snapshot_teacher(policy: &PolicyParams, step: usize) -> TeacherSnapshot {
    TeacherSnapshot {
        params: policy.clone(),
        step,
    }
}

/// Trains on task `step` of `suite` and fills column `step` of its success rows.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    student: &mut PolicyParams,
    teacher: Option<&TeacherSnapshot>,
    data: &TaskData,
    buffer: &ReplayBuffer,
    config: &TrainConfig,
    suite: &TaskSuite,
    step: usize,
    success: &mut SuccessTensor,
    hook: &mut Hook<'_>,
) -> Result<()> {
    let weights = config.effective_weights();
    let teacher = teacher
        .filter(|_| config.method == Method::M2distill)
        .map(TeacherSnapshot::params);
    let l = student.config.context_len;
    let mut batch_rng = rng_from(&[config.seed, step as u64, 1]);
    let mut kl_rng = rng_from(&[config.seed, step as u64, 2]);
    let mut adam = Adam::new(&student.tensors, config.lr);

    let n_cur = if buffer.is_empty() {
        config.batch_size
    } else {
        ((config.mix_ratio * config.batch_size as f64).ceil() as usize).clamp(1, config.batch_size)
    };
    let batches = data.n_windows().div_ceil(n_cur);
    let diverged = |epoch: usize, detail: String| Error::Diverged { step, epoch, detail };

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut sum = LossBreakdown::default();
        for b in 0..batches {
            let (cur, ex) = sample_batch(data, buffer, config.batch_size, config.mix_ratio, l, &mut batch_rng)?;
            let t_out = match (teacher, &ex) {
                (Some(t), Some(e)) => Some(teacher_outputs(t, &e.obs)?),
                _ => None,
            };
            let mut tape = Tape::new();
            let out = total_loss_with_teacher(
                &mut tape,
                student,
                t_out.as_ref(),
                &cur,
                ex.as_ref(),
                &weights,
                config.kl_samples,
                KlNoise::Sample(&mut kl_rng),
            )
            .map_err(|e| diverged(epoch, e.to_string()))?;
            let br = out.breakdown;
            if !br.total.is_finite() {
                return Err(diverged(epoch, format!("loss {br:?}")));
            }
            let mut g = tape.backward(out.loss).map_err(|e| diverged(epoch, e.to_string()))?;
            clip_grad_norm(&mut g, config.grad_clip);
            adam.step(&mut student.tensors, &g)
                .map_err(|e| diverged(epoch, format!("batch {b}: {e}")))?;
            hook(TrainEvent::Batch { step, epoch, batch: b, loss: &br })?;
            sum.bc_nll += br.bc_nll;
            sum.l_agentview += br.l_agentview;
            sum.l_handeye += br.l_handeye;
            sum.l_text += br.l_text;
            sum.l_extra += br.l_extra;
            sum.l_policy += br.l_policy;
            sum.total += br.total;
        }
        let n = batches as f64;
        let mean = LossBreakdown {
            bc_nll: sum.bc_nll / n,
            l_agentview: sum.l_agentview / n,
            l_handeye: sum.l_handeye / n,
            l_text: sum.l_text / n,
            l_extra: sum.l_extra / n,
            l_policy: sum.l_policy / n,
            total: sum.total / n,
        };
        hook(TrainEvent::Epoch(&EpochLog {
            step,
            epoch,
            batches,
            loss: mean,
            wall_secs: start.elapsed().as_secs_f64(),
        }))?;

        if let Some(e) = config.eval_epochs.iter().position(|&x| x == epoch) {
            for j in 0..=step {
                let task = &suite.tasks[j];
                let policy = GreedyPolicy(student);
                let rate = if config.parallel_eval {
                    crate::eval::rollout_success_parallel(&policy, task, config.eval_episodes, config.seed)?
                } else {
                    rollout_success(&policy, task, config.eval_episodes, config.seed)?
                };
                success.set(step, j, e, rate)?;
            }
            hook(TrainEvent::Checkpoint {
                step,
                epoch,
                params: student,
            })?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifelongReport {
    pub success: SuccessTensor,
    pub epochs: Vec<EpochLog>,
    pub drift: Vec<DriftRecord>,
    pub final_params: PolicyParams,
}

/// Trains `suite.tasks` in order. `demos[k]` is moved into training for
/// task `k` and dropped afterwards; only the replay buffer carries past
/// data forward. Task 0's demos double as the fixed drift probe.
pub fn run_lifelong(
    suite: &TaskSuite,
    demos: Vec<Vec<Trajectory>>,
    policy: &PolicyConfig,
    config: &TrainConfig,
    hook: &mut Hook<'_>,
) -> Result<LifelongReport> {
    config.validate()?;
    policy.validate()?;
    if demos.len() != suite.tasks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} demo sets for {} tasks",
            demos.len(),
            suite.tasks.len()
        )));
    }
    let k = suite.tasks.len();
    let probe = probe_batch(demos.first().map_or(&[][..], Vec::as_slice))?;
    let mut student = init_params(policy, derive_seed(&[config.seed, 0x1417]))?;
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let mut success = SuccessTensor::new(k, config.eval_epochs.clone())?;
    let mut epochs = Vec::new();
    let mut drift = Vec::new();

    for (step, task_demos) in demos.into_iter().enumerate() {
        let teacher = (step > 0).then(|| snapshot_teacher(&student, step - 1));
        let data = TaskData::from_trajectories(&task_demos)?;
        drop(task_demos);
        {
            let mut inner = |ev: TrainEvent<'_>| {
                if let TrainEvent::Epoch(e) = &ev {
                    epochs.push((*e).clone());
                }
                hook(ev)
            };
            train_task(
                &mut student,
                teacher.as_ref(),
                &data,
                &buffer,
                config,
                suite,
                step,
                &mut success,
                &mut inner,
            )?;
        }
        if let Some(t) = &teacher {
            drift.push(latent_drift(&student, t.params(), &probe, step)?);
        }
        if config.method.uses_replay() {
            let mut rng = rng_from(&[config.seed, step as u64, 3]);
            buffer.push(step, data.trajectories, &mut rng);
        }
    }
    Ok(LifelongReport {
        success,
        epochs,
        drift,
        final_params: student,
    })
}
