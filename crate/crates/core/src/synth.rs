//! Synthetic 2D tabletop pick-and-place suites with a scripted expert.
//!
//! The workspace is the unit square. An arm moves by a clamped planar
//! displacement each step, can grasp the nearest object within
//! [`GRASP_RADIUS`], and must drop the task's target object inside the goal
//! region.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

pub const MAX_STEP: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.05;
pub const DEFAULT_HORIZON: usize = 60;

pub const AGENTVIEW_SIDE: usize = 8;
pub const HANDEYE_SIDE: usize = 5;
/// Cell size of the fine grid the hand camera crops from.
pub const HANDEYE_CELL: f64 = 0.025;
pub const AGENTVIEW_DIM: usize = AGENTVIEW_SIDE * AGENTVIEW_SIDE;
pub const HANDEYE_DIM: usize = HANDEYE_SIDE * HANDEYE_SIDE;
pub const LANG_DIM: usize = 16;
pub const JOINT_DIM: usize = 4;
pub const GRIPPER_DIM: usize = 1;
pub const OBS_DIM: usize = AGENTVIEW_DIM + HANDEYE_DIM + LANG_DIM + JOINT_DIM + GRIPPER_DIM;
pub const ACTION_DIM: usize = 3;

const ARM_MARK: f64 = -1.0;
const HANDEYE_EMPTY: f64 = -0.25;
const SPAWN_HALF: f64 = 0.04;
/// Fraction of the remaining distance the expert covers per step.
const EXPERT_GAIN: f64 = 0.3;
/// The expert closes the gripper within this distance of the target.
const GRIP_WINDOW: f64 = 3.0 * GRASP_RADIUS;
const GOAL_RADIUS: f64 = 0.1;
/// Fingers closed on an object stop at this aperture.
const OBJECT_WIDTH: f64 = 0.4;
const ARM_START: [f64; 2] = [0.5, 0.45];
const SHARED_GOAL: [f64; 2] = [0.5, 0.82];
const GOAL_CENTERS: [[f64; 2]; 5] = [
    [0.2, 0.85],
    [0.5, 0.85],
    [0.8, 0.85],
    [0.15, 0.55],
    [0.85, 0.55],
];
const SPATIAL_SIGNATURE: f64 = 0.6;
/// Std of the execution noise applied while recording demonstrations.
const DEMO_NOISE: f64 = 0.3;
/// Probability of inverting the executed grip command while nothing is held.
const DEMO_GRIP_FLIP: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SuiteKind {
    Object,
    Goal,
    Spatial,
}

impl SuiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteKind::Object => "OBJECT",
            SuiteKind::Goal => "GOAL",
            SuiteKind::Spatial => "SPATIAL",
        }
    }
}

impl std::str::FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "OBJECT" => Ok(SuiteKind::Object),
            "GOAL" => Ok(SuiteKind::Goal),
            "SPATIAL" => Ok(SuiteKind::Spatial),
            _ => Err(Error::InvalidArgument(format!("unknown suite kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned spawn rectangle `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    fn around(c: [f64; 2], half: f64) -> Self {
        Rect {
            lo: [c[0] - half, c[1] - half],
            hi: [c[0] + half, c[1] + half],
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|d| p[d] >= self.lo[d] && p[d] <= self.hi[d])
    }

    pub fn disjoint(&self, other: &Rect) -> bool {
        (0..2).any(|d| self.hi[d] < other.lo[d] || other.hi[d] < self.lo[d])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Appearance vector; its first entry is the scalar signature shown on
    /// the camera grids.
    pub appearance: [f64; 3],
    pub spawn: Rect,
}

impl ObjectSpec {
    pub fn signature(&self) -> f64 {
        self.appearance[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: SuiteKind,
    pub lang_vec: Vec<f64>,
    pub objects: Vec<ObjectSpec>,
    pub arm_start: [f64; 2],
    pub target: usize,
    pub goal_center: [f64; 2],
    pub goal_radius: f64,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub kind: SuiteKind,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

fn unit_vector(rng: &mut crate::seed::Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Spawn centres for `n` objects laid out in rows of five below the arm.
fn slot_centers(n: usize) -> Vec<[f64; 2]> {
    let xs = [0.12, 0.31, 0.5, 0.69, 0.88];
    let rows = [0.1, 0.32, 0.21];
    (0..n)
        .map(|i| {
            let row = i / xs.len();
            let col = i % xs.len();
            let shift = if row == 2 { 0.095 } else { 0.0 };
            [xs[col] + shift * if col == 4 { -1.0 } else { 1.0 }, rows[row]]
        })
        .collect()
}

fn signatures(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.6];
    }
    (0..n).map(|i| 0.2 + 0.75 * i as f64 / (n - 1) as f64).collect()
}

/// Builds `k` tasks of the given kind, deterministic in `seed`.
pub fn make_suite(kind: SuiteKind, k: usize, seed: u64) -> Result<TaskSuite> {
    if k == 0 {
        return Err(Error::InvalidArgument("suite needs at least one task".into()));
    }
    let max = 15;
    if k > max {
        return Err(Error::InvalidArgument(format!(
            "{kind} suites support at most {max} tasks, got {k}"
        )));
    }
    let mut rng = rng_from(&[seed, kind as u64]);

    let n_objects = match kind {
        SuiteKind::Object => k,
        SuiteKind::Goal => 3,
        SuiteKind::Spatial => k.max(2),
    };
    let mut sigs = signatures(n_objects);
    sigs.shuffle(&mut rng);
    let objects: Vec<ObjectSpec> = slot_centers(n_objects)
        .into_iter()
        .zip(sigs)
        .map(|(c, s)| {
            let appearance = match kind {
                SuiteKind::Spatial => [SPATIAL_SIGNATURE, 0.5, 0.5],
                _ => [s, rng.random::<f64>(), rng.random::<f64>()],
            };
            ObjectSpec {
                appearance,
                spawn: Rect::around(c, SPAWN_HALF),
            }
        })
        .collect();

    let tasks = (0..k)
        .map(|t| {
            let (target, goal_center) = match kind {
                SuiteKind::Object | SuiteKind::Spatial => (t, SHARED_GOAL),
                SuiteKind::Goal => (t % 3, GOAL_CENTERS[t % GOAL_CENTERS.len()]),
            };
            TaskSpec {
                task_id: t,
                kind,
                lang_vec: unit_vector(&mut rng, LANG_DIM),
                objects: objects.clone(),
                arm_start: ARM_START,
                target,
                goal_center,
                goal_radius: GOAL_RADIUS,
                horizon: DEFAULT_HORIZON,
            }
        })
        .collect();
    Ok(TaskSuite { kind, seed, tasks })
}

/// Planar displacement plus gripper command, each in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub grip: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, grip: f64) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Action {
            dx: c(dx),
            dy: c(dy),
            grip: c(grip),
        }
    }

    pub fn from_slice(a: &[f64]) -> Result<Self> {
        match a {
            [dx, dy, grip] => Ok(Action::new(*dx, *dy, *grip)),
            _ => Err(Error::InvalidArgument(format!("action needs 3 values, got {}", a.len()))),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.grip]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub positions: Vec<[f64; 2]>,
    pub features: Vec<[f64; 3]>,
    pub arm: [f64; 2],
    pub arm_vel: [f64; 2],
    /// Open fraction.
    pub gripper: f64,
    pub held: Option<usize>,
    pub t: usize,
    pub horizon: usize,
}

pub fn reset(task: &TaskSpec, episode_seed: u64) -> SimState {
    let mut rng = rng_from(&[episode_seed, task.task_id as u64]);
    let positions = task
        .objects
        .iter()
        .map(|o| {
            [
                rng.random_range(o.spawn.lo[0]..=o.spawn.hi[0]),
                rng.random_range(o.spawn.lo[1]..=o.spawn.hi[1]),
            ]
        })
        .collect();
    SimState {
        positions,
        features: task.objects.iter().map(|o| o.appearance).collect(),
        arm: task.arm_start,
        arm_vel: [0.0, 0.0],
        gripper: 1.0,
        held: None,
        t: 0,
        horizon: task.horizon,
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Advances one step: move (clamped to [`MAX_STEP`] and the workspace), then
/// apply the gripper command.
pub fn step(state: &SimState, action: Action) -> Result<SimState> {
    if state.t >= state.horizon {
        return Err(Error::Simulation(format!(
            "step called at t = {} with horizon {}",
            state.t, state.horizon
        )));
    }
    let action = Action::new(action.dx, action.dy, action.grip);
    let mut d = [action.dx * MAX_STEP, action.dy * MAX_STEP];
    let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if norm > MAX_STEP {
        d = [d[0] * MAX_STEP / norm, d[1] * MAX_STEP / norm];
    }
    let mut s = state.clone();
    let next = [(s.arm[0] + d[0]).clamp(0.0, 1.0), (s.arm[1] + d[1]).clamp(0.0, 1.0)];
    s.arm_vel = [next[0] - s.arm[0], next[1] - s.arm[1]];
    s.arm = next;
    if let Some(h) = s.held {
        s.positions[h] = s.arm;
    }

    if action.grip > 0.0 {
        if s.held.is_none() {
            s.held = s
                .positions
                .iter()
                .enumerate()
                .map(|(i, &p)| (i, dist(p, s.arm)))
                .filter(|&(_, d)| d <= GRASP_RADIUS)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
            if let Some(h) = s.held {
                s.positions[h] = s.arm;
            }
        }
    } else if action.grip < 0.0 {
        s.held = None;
    }
    s.gripper = (s.gripper - 0.5 * action.grip).clamp(0.0, 1.0);
    s.t += 1;
    Ok(s)
}

pub fn goal_reached(task: &TaskSpec, state: &SimState) -> bool {
    state.held != Some(task.target)
        && dist(state.positions[task.target], task.goal_center) <= task.goal_radius
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiModalObs {
    pub agentview: Vec<f64>,
    pub handeye: Vec<f64>,
    pub lang: Vec<f64>,
    pub joint: Vec<f64>,
    pub gripper: Vec<f64>,
}

/// Modality order used for flat storage and for policy tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lang,
    Agentview,
    Handeye,
    Joint,
    Gripper,
}

impl Modality {
    /// Token order within a timestep.
    pub const ALL: [Modality; 5] = [
        Modality::Lang,
        Modality::Agentview,
        Modality::Handeye,
        Modality::Joint,
        Modality::Gripper,
    ];

    pub fn dim(self) -> usize {
        match self {
            Modality::Lang => LANG_DIM,
            Modality::Agentview => AGENTVIEW_DIM,
            Modality::Handeye => HANDEYE_DIM,
            Modality::Joint => JOINT_DIM,
            Modality::Gripper => GRIPPER_DIM,
        }
    }

    /// Offset of this modality in [`MultiModalObs::to_flat`].
    pub fn offset(self) -> usize {
        match self {
            Modality::Agentview => 0,
            Modality::Handeye => AGENTVIEW_DIM,
            Modality::Lang => AGENTVIEW_DIM + HANDEYE_DIM,
            Modality::Joint => AGENTVIEW_DIM + HANDEYE_DIM + LANG_DIM,
            Modality::Gripper => AGENTVIEW_DIM + HANDEYE_DIM + LANG_DIM + JOINT_DIM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Lang => "lang",
            Modality::Agentview => "agentview",
            Modality::Handeye => "handeye",
            Modality::Joint => "joint",
            Modality::Gripper => "gripper",
        }
    }
}

impl MultiModalObs {
    /// Flat layout: agentview, handeye, lang, joint, gripper.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_DIM);
        v.extend_from_slice(&self.agentview);
        v.extend_from_slice(&self.handeye);
        v.extend_from_slice(&self.lang);
        v.extend_from_slice(&self.joint);
        v.extend_from_slice(&self.gripper);
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != OBS_DIM {
            return Err(Error::Format(format!(
                "observation has {} values, expected {OBS_DIM}",
                v.len()
            )));
        }
        let part = |m: Modality| v[m.offset()..m.offset() + m.dim()].to_vec();
        Ok(MultiModalObs {
            agentview: part(Modality::Agentview),
            handeye: part(Modality::Handeye),
            lang: part(Modality::Lang),
            joint: part(Modality::Joint),
            gripper: part(Modality::Gripper),
        })
    }

    pub fn modality(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Lang => &self.lang,
            Modality::Agentview => &self.agentview,
            Modality::Handeye => &self.handeye,
            Modality::Joint => &self.joint,
            Modality::Gripper => &self.gripper,
        }
    }
}

fn cell(x: f64, size: f64, n: usize) -> usize {
    ((x / size).floor().max(0.0) as usize).min(n - 1)
}

pub fn observe(state: &SimState, task: &TaskSpec) -> MultiModalObs {
    let cs = 1.0 / AGENTVIEW_SIDE as f64;
    let mut agentview = vec![0.0; AGENTVIEW_DIM];
    for (p, f) in state.positions.iter().zip(&state.features) {
        let (cx, cy) = (cell(p[0], cs, AGENTVIEW_SIDE), cell(p[1], cs, AGENTVIEW_SIDE));
        agentview[cy * AGENTVIEW_SIDE + cx] = f[0];
    }
    let (ax, ay) = (cell(state.arm[0], cs, AGENTVIEW_SIDE), cell(state.arm[1], cs, AGENTVIEW_SIDE));
    agentview[ay * AGENTVIEW_SIDE + ax] = ARM_MARK;

    let fine = (1.0 / HANDEYE_CELL).round() as usize;
    let fx = cell(state.arm[0], HANDEYE_CELL, fine) as isize;
    let fy = cell(state.arm[1], HANDEYE_CELL, fine) as isize;
    let half = (HANDEYE_SIDE / 2) as isize;
    let mut handeye = vec![0.0; HANDEYE_DIM];
    for r in 0..HANDEYE_SIDE as isize {
        for c in 0..HANDEYE_SIDE as isize {
            let (gx, gy) = (fx + c - half, fy + r - half);
            if gx >= 0 && gy >= 0 && (gx as usize) < fine && (gy as usize) < fine {
                handeye[(r as usize) * HANDEYE_SIDE + c as usize] = HANDEYE_EMPTY;
            }
        }
    }
    for (p, f) in state.positions.iter().zip(&state.features) {
        let gx = cell(p[0], HANDEYE_CELL, fine) as isize - fx + half;
        let gy = cell(p[1], HANDEYE_CELL, fine) as isize - fy + half;
        if (0..HANDEYE_SIDE as isize).contains(&gx) && (0..HANDEYE_SIDE as isize).contains(&gy) {
            handeye[gy as usize * HANDEYE_SIDE + gx as usize] = f[0];
        }
    }

    MultiModalObs {
        agentview,
        handeye,
        lang: task.lang_vec.clone(),
        joint: vec![
            2.0 * state.arm[0] - 1.0,
            2.0 * state.arm[1] - 1.0,
            state.arm_vel[0] / MAX_STEP,
            state.arm_vel[1] / MAX_STEP,
        ],
        gripper: vec![if state.held.is_some() { state.gripper.max(OBJECT_WIDTH) } else { state.gripper }],
    }
}

/// Proportional displacement command toward `to`, saturating at one full step.
fn toward(from: [f64; 2], to: [f64; 2]) -> (f64, f64) {
    let d = [
        EXPERT_GAIN * (to[0] - from[0]) / MAX_STEP,
        EXPERT_GAIN * (to[1] - from[1]) / MAX_STEP,
    ];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n > 1.0 {
        (d[0] / n, d[1] / n)
    } else {
        (d[0], d[1])
    }
}

/// Approach, grasp, carry, release.
pub fn scripted_expert(task: &TaskSpec, state: &SimState) -> Action {
    match state.held {
        Some(h) if h != task.target => Action::new(0.0, 0.0, -1.0),
        Some(_) => {
            if dist(state.arm, task.goal_center) <= 0.5 * task.goal_radius {
                Action::new(0.0, 0.0, -1.0)
            } else {
                let (dx, dy) = toward(state.arm, task.goal_center);
                Action::new(dx, dy, 1.0)
            }
        }
        None => {
            let target = state.positions[task.target];
            let (dx, dy) = toward(state.arm, target);
            let grip = if dist(state.arm, target) <= GRIP_WINDOW { 1.0 } else { -1.0 };
            Action::new(dx, dy, grip)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    pub obs: MultiModalObs,
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: usize,
    pub kind: SuiteKind,
    pub steps: Vec<TrajStep>,
    pub success: bool,
}

/// Runs one episode, stopping at success or the horizon.
///
/// `policy` sees the observation history so far (most recent last).
pub fn run_episode<F>(task: &TaskSpec, episode_seed: u64, mut policy: F) -> Result<(Trajectory, SimState)>
where
    F: FnMut(&SimState, &[MultiModalObs]) -> Result<Action>,
{
    run_episode_split(task, episode_seed, |s, h| policy(s, h).map(|a| (a, a)))
}

/// Like [`run_episode`], but the closure returns `(recorded, executed)`:
/// the first action is stored in the trajectory, the second drives the sim.
fn run_episode_split<F>(task: &TaskSpec, episode_seed: u64, mut policy: F) -> Result<(Trajectory, SimState)>
where
    F: FnMut(&SimState, &[MultiModalObs]) -> Result<(Action, Action)>,
{
    let mut state = reset(task, episode_seed);
    let mut history: Vec<MultiModalObs> = Vec::with_capacity(task.horizon);
    let mut steps = Vec::with_capacity(task.horizon);
    let mut success = false;
    while state.t < task.horizon {
        history.push(observe(&state, task));
        let (recorded, executed) = policy(&state, &history)?;
        steps.push(TrajStep {
            obs: history.last().cloned().unwrap_or_else(|| observe(&state, task)),
            action: recorded,
        });
        state = step(&state, executed)?;
        if goal_reached(task, &state) {
            success = true;
            break;
        }
    }
    Ok((
        Trajectory {
            task_id: task.task_id,
            kind: task.kind,
            steps,
            success,
        },
        state,
    ))
}

/// One expert demonstration. The executed displacement is perturbed by
/// Gaussian noise, and while nothing is held the executed grip command is
/// inverted with probability [`DEMO_GRIP_FLIP`]. The clean expert action is
/// recorded, so demos cover off-nominal states and their corrections.
pub fn expert_demo(task: &TaskSpec, episode_seed: u64) -> Result<Trajectory> {
    let mut rng = rng_from(&[episode_seed, 0xD0]);
    let (traj, _) = run_episode_split(task, episode_seed, |s, _| {
        let clean = scripted_expert(task, s);
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        let flip = s.held.is_none() && rng.random_bool(DEMO_GRIP_FLIP);
        let noisy = Action::new(
            clean.dx + DEMO_NOISE * nx,
            clean.dy + DEMO_NOISE * ny,
            if flip { -clean.grip } else { clean.grip },
        );
        Ok((clean, noisy))
    })?;
    Ok(traj)
}

/// `n` successful expert demonstrations; failed episodes are retried with
/// fresh seeds.
pub fn collect_demos(task: &TaskSpec, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one demonstration".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    let mut consecutive = 0usize;
    while out.len() < n {
        let ep_seed = derive_seed(&[seed, task.task_id as u64, attempt]);
        attempt += 1;
        let traj = expert_demo(task, ep_seed)?;
        if traj.success {
            consecutive = 0;
            out.push(traj);
        } else {
            consecutive += 1;
            if consecutive >= 10 * n {
                return Err(Error::Unsolvable {
                    task_id: task.task_id,
                    attempts: consecutive,
                });
            }
        }
    }
    Ok(out)
}
