//! Behavior cloning of the denoiser with the diffusion loss plus a weighted
//! dispersive term on hook-layer features, and success-rate evaluation.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::diffusion::{ddpm_loss_node, NoiseSchedule, NoisedBatch};
use crate::dispersive::{disp_over_timesteps_node, DispersiveConfig};
use crate::envs::{run_episode, Controller, DemoDataset, EnvSpec};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::networks::{DenoiserParams, ParamSet};
use crate::optim::{AdamW, AdamWConfig};
use crate::policy::DiffusionPolicy;
use crate::rng::{instance, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Episodes per evaluation; 0 disables evaluation.
    pub eval_episodes: usize,
    /// One metrics row per this many iterations, losses averaged over it.
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { iterations: 2000, batch_size: 64, lr: 1e-4, eval_every: 500, eval_episodes: 50, log_every: 10 }
    }
}

/// Losses of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub l_diff: f64,
    pub l_disp: f64,
    pub l_total: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub denoiser: DenoiserParams,
    pub opt: AdamW,
    pub iteration: u64,
    /// Master seed; each iteration draws from streams keyed by it.
    pub seed: u64,
    pub last: Option<StepMetrics>,
}

impl PretrainState {
    pub fn new(denoiser: DenoiserParams, lr: f64, seed: u64) -> Self {
        let opt = AdamW::new(AdamWConfig { lr, ..AdamWConfig::default() }, &denoiser.params);
        Self { denoiser, opt, iteration: 0, seed, last: None }
    }

    /// Seed of the streams used by the next update.
    pub fn batch_seed(&self) -> u64 {
        instance_seed(self.seed, self.iteration)
    }
}

fn instance_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Draws this iteration's minibatch of `(obs, chunk)` rows.
pub fn sample_batch(obs: &[Vec<f64>], actions: &[Vec<f64>], batch: usize, seed: u64, iteration: u64) -> Result<(Tensor, Tensor)> {
    if obs.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut rng = instance(seed, iteration, Stream::DataOrder);
    let idx: Vec<usize> = if batch <= obs.len() {
        index::sample(&mut rng, obs.len(), batch).into_vec()
    } else {
        use rand::Rng as _;
        (0..batch).map(|_| rng.random_range(0..obs.len())).collect()
    };
    let o: Vec<&Vec<f64>> = idx.iter().map(|&i| &obs[i]).collect();
    let a: Vec<&Vec<f64>> = idx.iter().map(|&i| &actions[i]).collect();
    Ok((Tensor::from_rows(&o)?, Tensor::from_rows(&a)?))
}

/// One update on `(obs, actions)`. The noise stream is keyed by the batch
/// seed; on a non-finite loss or gradient the state is left untouched.
pub fn pretrain_step(
    state: &mut PretrainState,
    obs: &Tensor,
    actions: &Tensor,
    sched: &NoiseSchedule,
    disp: &DispersiveConfig,
) -> Result<StepMetrics> {
    let batch_seed = state.batch_seed();
    let (metrics, grads) = step_gradients(state, obs, actions, sched, disp).map_err(|e| match e {
        Error::Autodiff(AutodiffError::NonFinite { .. }) => Error::NonFiniteLoss { batch_seed },
        other => other,
    })?;
    if ![metrics.l_diff, metrics.l_disp, metrics.l_total].iter().all(|v| v.is_finite())
        || !grads.iter().flatten().all(|v| v.is_finite())
    {
        return Err(Error::NonFiniteLoss { batch_seed });
    }
    state.opt.update(&mut state.denoiser.params, &grads);
    state.iteration += 1;
    state.last = Some(metrics);
    Ok(metrics)
}

fn step_gradients(
    state: &PretrainState,
    obs: &Tensor,
    actions: &Tensor,
    sched: &NoiseSchedule,
    disp: &DispersiveConfig,
) -> Result<(StepMetrics, Vec<Vec<f64>>)> {
    let mut rng = instance(state.seed, state.iteration, Stream::Noise);
    let noised = NoisedBatch::sample(actions, sched, &mut rng)?;
    let mut g = Graph::new();
    let bound = state.denoiser.bind(&mut g, true);
    let noisy = g.constant(noised.noisy.clone());
    let o = g.constant(obs.clone());
    let out = bound.forward(&mut g, noisy, o, &noised.net_timesteps(sched)?)?;
    let noise = g.constant(noised.noise.clone());
    let l_diff = ddpm_loss_node(&mut g, out.eps, noise)?;
    let l_disp = disp_over_timesteps_node(&mut g, out.hook(), &noised.timesteps, disp)?;
    let total = match l_disp {
        Some(d) if disp.lambda > 0.0 => {
            let w = g.scale(d, disp.lambda)?;
            g.add(l_diff, w)?
        }
        _ => l_diff,
    };
    let metrics = StepMetrics {
        l_diff: g.scalar_value(l_diff),
        l_disp: l_disp.map_or(0.0, |d| g.scalar_value(d)),
        l_total: g.scalar_value(total),
    };
    let grads = ParamSet::collect_grads(&bound.ids, &g.backward(total)?);
    Ok((metrics, grads))
}

/// Success rate and mean return over a set of evaluation episodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Runs `n_episodes` episodes; episode `e` uses reset and action streams
/// keyed by `(seed, e)`, so the result does not depend on `exec`.
pub fn evaluate_controller<C: Controller + Sync + ?Sized>(
    ctrl: &C,
    spec: &EnvSpec,
    n_episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<EvalSummary> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation episode".into()));
    }
    let episodes = map_indexed(exec, n_episodes, |e| {
        let mut reset = instance(seed, e as u64, Stream::EnvReset);
        let mut act = instance(seed, e as u64, Stream::Eval);
        run_episode(spec, ctrl, &mut reset, &mut act).map_err(|err| Error::Env { env_index: e, message: err.to_string() })
    });
    let mut successes = 0;
    let mut ret = 0.0;
    for ep in episodes {
        let ep = ep?;
        successes += usize::from(ep.success);
        ret += ep.total_reward;
    }
    Ok(EvalSummary {
        episodes: n_episodes,
        success_rate: successes as f64 / n_episodes as f64,
        mean_return: ret / n_episodes as f64,
    })
}

/// Success rate of the denoiser as a policy.
pub fn evaluate_policy(
    policy: &DiffusionPolicy<'_>,
    spec: &EnvSpec,
    n_episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    Ok(evaluate_controller(policy, spec, n_episodes, seed, exec)?.success_rate)
}

/// One metrics row; loss columns are window means, `None` when the row
/// covers no updates.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRow {
    pub iteration: u64,
    pub losses: Option<StepMetrics>,
    pub eval_success: Option<f64>,
}

pub struct PretrainOutcome {
    pub state: PretrainState,
    pub rows: Vec<PretrainRow>,
    /// Parameters with the highest evaluation success (earliest on ties).
    pub best: Option<(DenoiserParams, f64, u64)>,
}

/// Everything `run_pretrain` needs besides the starting state.
pub struct PretrainSetup<'a> {
    pub config: &'a PretrainConfig,
    pub dataset: &'a DemoDataset,
    pub sched: &'a NoiseSchedule,
    pub disp: &'a DispersiveConfig,
    /// Minimum sampling std during evaluation.
    pub eval_min_std: f64,
    pub exec: Execution,
}

/// Runs `config.iterations` updates from `state`, evaluating periodically
/// and at the end. `on_row` sees every row as it is produced.
pub fn run_pretrain(
    setup: &PretrainSetup<'_>,
    mut state: PretrainState,
    mut on_row: impl FnMut(&PretrainRow) -> Result<()>,
) -> Result<PretrainOutcome> {
    let cfg = setup.config;
    if setup.dataset.num_pairs() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::InvalidArgument("batch_size and log_every must be positive".into()));
    }
    setup.disp.validate()?;
    let (obs, actions) = setup.dataset.pairs();
    let eval_seed = instance_seed(state.seed, u64::MAX);
    let evaluate = |d: &DenoiserParams| -> Result<Option<f64>> {
        if cfg.eval_episodes == 0 {
            return Ok(None);
        }
        let policy =
            DiffusionPolicy { denoiser: d, normalizer: &setup.dataset.normalizer, sched: setup.sched, min_std: setup.eval_min_std };
        evaluate_policy(&policy, &setup.dataset.spec, cfg.eval_episodes, eval_seed, setup.exec).map(Some)
    };
    let mut rows = Vec::new();
    let mut best: Option<(DenoiserParams, f64, u64)> = None;
    let mut window = Vec::new();
    let start = state.iteration;
    let end = start + cfg.iterations as u64;
    while state.iteration < end {
        let (o, a) = sample_batch(&obs, &actions, cfg.batch_size, state.seed, state.iteration)?;
        window.push(pretrain_step(&mut state, &o, &a, setup.sched, setup.disp)?);
        let it = state.iteration;
        let eval_now = it == end || (cfg.eval_every > 0 && (it - start) % cfg.eval_every as u64 == 0);
        if !(eval_now || (it - start) % cfg.log_every as u64 == 0) {
            continue;
        }
        let eval_success = if eval_now { evaluate(&state.denoiser)? } else { None };
        if let Some(s) = eval_success {
            if best.as_ref().is_none_or(|b| s > b.1) {
                best = Some((state.denoiser.clone(), s, it));
            }
        }
        let n = window.len() as f64;
        let losses = StepMetrics {
            l_diff: window.iter().map(|m| m.l_diff).sum::<f64>() / n,
            l_disp: window.iter().map(|m| m.l_disp).sum::<f64>() / n,
            l_total: window.iter().map(|m| m.l_total).sum::<f64>() / n,
        };
        window.clear();
        let row = PretrainRow { iteration: it, losses: Some(losses), eval_success };
        on_row(&row)?;
        rows.push(row);
    }
    if cfg.iterations == 0 {
        let eval_success = evaluate(&state.denoiser)?;
        if let Some(s) = eval_success {
            best = Some((state.denoiser.clone(), s, state.iteration));
        }
        let row = PretrainRow { iteration: state.iteration, losses: None, eval_success };
        on_row(&row)?;
        rows.push(row);
    }
    Ok(PretrainOutcome { state, rows, best })
}
