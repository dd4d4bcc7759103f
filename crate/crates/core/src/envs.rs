//! Velocity-free point-mass tasks on the plane.
//!
//! An action chunk holds `horizon` consecutive 2-D velocity commands in
//! `[-1, 1]`; each moves the agent by `dt * a`. Episodes last at most
//! `max_steps` sub-steps and end early on success or, in the corridor
//! task, on hitting the wall.
//!
//! * `reach_easy`: one random goal, visible in the observation.
//! * `pointmass_bimodal`: two fixed goals, either counts as success.
//! * `corridor_precision`: two fixed goals; a tiny cue coordinate says
//!   which one is correct, and heading for the wrong side hits a wall.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::HookPlacement;
use crate::rng::{instance, stream, Rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    ReachEasy,
    PointmassBimodal,
    CorridorPrecision,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::ReachEasy, EnvKind::PointmassBimodal, EnvKind::CorridorPrecision];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::ReachEasy => "reach_easy",
            EnvKind::PointmassBimodal => "pointmass_bimodal",
            EnvKind::CorridorPrecision => "corridor_precision",
        }
    }

    /// Default dispersive hook: early for the simple tasks, late for the
    /// precision task.
    pub fn default_placement(self) -> HookPlacement {
        match self {
            EnvKind::CorridorPrecision => HookPlacement::Late,
            _ => HookPlacement::Early,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown environment `{s}`")))
    }
}

pub const CUE: f64 = 0.05;
pub const BIMODAL_GOALS: [[f64; 2]; 2] = [[-1.0, 1.0], [1.0, 1.0]];
pub const CORRIDOR_GOALS: [[f64; 2]; 2] = [[-0.6, 0.8], [0.6, 0.8]];
/// Lateral offset on the wrong side of the cue at which the wall is hit.
pub const WALL_OFFSET: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub max_steps: usize,
    pub success_radius: f64,
    pub dt: f64,
    pub success_bonus: f64,
    pub wall_penalty: f64,
    /// Success bonus and wall penalty only, no distance shaping.
    pub sparse_reward: bool,
}

impl EnvSpec {
    pub fn new(kind: EnvKind, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        let (obs_dim, max_steps) = match kind {
            EnvKind::ReachEasy => (4, 40),
            EnvKind::PointmassBimodal => (6, 40),
            EnvKind::CorridorPrecision => (7, 60),
        };
        Ok(Self {
            kind,
            obs_dim,
            action_dim: 2,
            horizon,
            max_steps,
            success_radius: 0.1,
            dt: 0.05,
            success_bonus: 10.0,
            wall_penalty: 5.0,
            sparse_reward: false,
        })
    }

    pub fn chunk_dim(&self) -> usize {
        self.action_dim * self.horizon
    }

    /// Upper bound on chunks per episode.
    pub fn max_chunks(&self) -> usize {
        self.max_steps.div_ceil(self.horizon)
    }
}

/// Full simulator state of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub goal: [f64; 2],
    /// Signed cue in the corridor task, 0 elsewhere.
    pub cue: f64,
    /// Goal the scripted expert steers to in the bimodal task.
    pub preferred_goal: usize,
    pub t: usize,
    pub done: bool,
    pub success: bool,
}

/// Result of executing one action chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// The clamped chunk actually executed.
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub sub_steps: usize,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl EnvState {
    pub fn reset(spec: &EnvSpec, rng: &mut Rng) -> Self {
        let mut s = EnvState { pos: [0.0; 2], goal: [0.0; 2], cue: 0.0, preferred_goal: 0, t: 0, done: false, success: false };
        match spec.kind {
            EnvKind::ReachEasy => {
                s.pos = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
                loop {
                    let g = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
                    if dist(g, s.pos) >= 0.3 {
                        s.goal = g;
                        break;
                    }
                }
            }
            EnvKind::PointmassBimodal => {
                s.preferred_goal = usize::from(rng.random_bool(0.5));
                s.goal = BIMODAL_GOALS[s.preferred_goal];
            }
            EnvKind::CorridorPrecision => {
                let right = rng.random_bool(0.5);
                s.cue = if right { CUE } else { -CUE };
                s.goal = CORRIDOR_GOALS[usize::from(right)];
            }
        }
        s
    }

    /// Observation: agent position, goal positions, then the cue.
    pub fn observe(&self, spec: &EnvSpec) -> Vec<f64> {
        let mut o = vec![self.pos[0], self.pos[1]];
        match spec.kind {
            EnvKind::ReachEasy => o.extend(self.goal),
            EnvKind::PointmassBimodal => BIMODAL_GOALS.iter().for_each(|g| o.extend(g)),
            EnvKind::CorridorPrecision => {
                CORRIDOR_GOALS.iter().for_each(|g| o.extend(g));
                o.push(self.cue);
            }
        }
        o
    }

    /// Distance to the goal that counts for success and shaping.
    pub fn goal_distance(&self, spec: &EnvSpec) -> f64 {
        match spec.kind {
            EnvKind::PointmassBimodal => BIMODAL_GOALS.iter().map(|g| dist(self.pos, *g)).fold(f64::INFINITY, f64::min),
            _ => dist(self.pos, self.goal),
        }
    }

    fn hit_wall(&self, spec: &EnvSpec) -> bool {
        spec.kind == EnvKind::CorridorPrecision && self.pos[0] * self.cue.signum() < -WALL_OFFSET
    }

    /// Executes a chunk sub-step by sub-step, stopping early once done.
    pub fn step(&mut self, spec: &EnvSpec, chunk: &[f64]) -> Result<Transition> {
        if chunk.len() != spec.chunk_dim() {
            return Err(Error::Shape(format!("action chunk has {} entries, expected {}", chunk.len(), spec.chunk_dim())));
        }
        if self.done {
            return Err(Error::InvalidArgument("step called on a finished episode".into()));
        }
        if !chunk.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite action".into()));
        }
        let action: Vec<f64> = chunk.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let mut reward = 0.0;
        let mut sub_steps = 0;
        for a in action.chunks(spec.action_dim) {
            self.pos[0] += spec.dt * a[0];
            self.pos[1] += spec.dt * a[1];
            self.t += 1;
            sub_steps += 1;
            let d = self.goal_distance(spec);
            if !spec.sparse_reward {
                reward -= d;
            }
            if self.hit_wall(spec) {
                reward -= spec.wall_penalty;
                self.done = true;
            } else if d <= spec.success_radius {
                reward += spec.success_bonus;
                self.success = true;
                self.done = true;
            }
            if self.t >= spec.max_steps {
                self.done = true;
            }
            if self.done {
                break;
            }
        }
        Ok(Transition { obs: self.observe(spec), action, reward, done: self.done, success: self.success, sub_steps })
    }
}

/// Deterministic reset from a seed; returns the initial observation.
pub fn env_reset(spec: &EnvSpec, seed: u64) -> (EnvState, Vec<f64>) {
    let s = EnvState::reset(spec, &mut stream(seed, Stream::EnvReset));
    let o = s.observe(spec);
    (s, o)
}

/// Anything that maps a state and its observation to an action chunk.
pub trait Controller {
    fn act(&self, spec: &EnvSpec, state: &EnvState, obs: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
}

/// Proportional controller toward the correct goal with Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScriptedExpert {
    pub gain: f64,
    pub noise_std: f64,
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        Self { gain: 10.0, noise_std: 0.05 }
    }
}

impl Controller for ScriptedExpert {
    fn act(&self, spec: &EnvSpec, state: &EnvState, _obs: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut p = state.pos;
        let mut chunk = Vec::with_capacity(spec.chunk_dim());
        for _ in 0..spec.horizon {
            for d in 0..2 {
                let a = (self.gain * (state.goal[d] - p[d])).clamp(-1.0, 1.0) + noise.sample(rng);
                let a = a.clamp(-1.0, 1.0);
                p[d] += spec.dt * a;
                chunk.push(a);
            }
        }
        Ok(chunk)
    }
}

/// Outcome of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub total_reward: f64,
    pub success: bool,
}

/// Runs `ctrl` from a fresh reset until the episode ends. Resets and
/// actions draw from separate streams, so different controllers face the
/// same initial states.
pub fn run_episode<C: Controller + ?Sized>(spec: &EnvSpec, ctrl: &C, reset_rng: &mut Rng, rng: &mut Rng) -> Result<Episode> {
    let mut state = EnvState::reset(spec, reset_rng);
    let mut obs = state.observe(spec);
    let mut ep = Episode { obs: Vec::new(), actions: Vec::new(), total_reward: 0.0, success: false };
    while !state.done {
        let chunk = ctrl.act(spec, &state, &obs, rng)?;
        let tr = state.step(spec, &chunk)?;
        ep.obs.push(obs);
        ep.actions.push(tr.action);
        ep.total_reward += tr.reward;
        obs = tr.obs;
    }
    ep.success = state.success;
    Ok(ep)
}

/// Per-dimension affine map `(x - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ObsNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Mean and standard deviation of `rows`; dimensions with standard
    /// deviation below 1e-6 get scale 1.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::InvalidArgument("no rows to fit".into()))?;
        let dim = first.as_ref().len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.as_ref()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v.sqrt() < 1e-6 { 1.0 } else { v.sqrt() }).collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Observation at the start of each chunk.
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub spec: EnvSpec,
    pub seed: u64,
    pub normalizer: ObsNormalizer,
    pub trajectories: Vec<Trajectory>,
}

impl DemoDataset {
    pub fn num_pairs(&self) -> usize {
        self.trajectories.iter().map(|t| t.obs.len()).sum()
    }

    /// All `(normalized obs, chunk)` pairs in trajectory order.
    pub fn pairs(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut obs = Vec::with_capacity(self.num_pairs());
        let mut act = Vec::with_capacity(self.num_pairs());
        for t in &self.trajectories {
            obs.extend(t.obs.iter().map(|o| self.normalizer.apply(o)));
            act.extend(t.actions.iter().cloned());
        }
        (obs, act)
    }
}

/// Attempts per requested trajectory before giving up.
const MAX_ATTEMPT_FACTOR: usize = 10;

/// Rolls out the scripted expert, keeping successful episodes until
/// `n_traj` are collected. Episode `e` draws from its own stream.
pub fn gen_demos(spec: &EnvSpec, n_traj: usize, seed: u64) -> Result<DemoDataset> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("need at least one trajectory".into()));
    }
    let expert = ScriptedExpert::default();
    let mut trajectories = Vec::with_capacity(n_traj);
    let mut attempts = 0;
    while trajectories.len() < n_traj && attempts < n_traj * MAX_ATTEMPT_FACTOR {
        let mut reset_rng = instance(seed, attempts as u64, Stream::EnvReset);
        let mut rng = instance(seed, attempts as u64, Stream::Demos);
        attempts += 1;
        let ep = run_episode(spec, &expert, &mut reset_rng, &mut rng)?;
        if ep.success {
            trajectories.push(Trajectory { obs: ep.obs, actions: ep.actions, success: true });
        }
    }
    let rate = trajectories.len() as f64 / attempts as f64;
    if trajectories.len() < n_traj || rate < 0.1 {
        return Err(Error::LowAcceptance { rate });
    }
    let all_obs: Vec<&Vec<f64>> = trajectories.iter().flat_map(|t| &t.obs).collect();
    let normalizer = ObsNormalizer::fit(&all_obs)?;
    Ok(DemoDataset { spec: spec.clone(), seed, normalizer, trajectories })
}
