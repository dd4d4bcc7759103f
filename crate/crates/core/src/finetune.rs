//! PPO fine-tuning over the denoising chain.
//!
//! Every environment step stores the full chain that produced its action
//! chunk. The policy log-likelihood of a step is the sum of the Gaussian
//! log-densities of its denoising transitions, so the PPO ratio is formed per
//! transition and the clipped surrogate is summed over a sampled subset of
//! transitions with importance weights.

use std::ops::Range;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::diffusion::{effective_std, sample_chain, DenoisingChain, NoiseSchedule};
use crate::dispersive::{disp_over_timesteps_node, DispersiveConfig};
use crate::envs::{EnvSpec, EnvState, ObsNormalizer};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::networks::{DenoiserParams, ParamSet, ValueParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::policy::DiffusionPolicy;
use crate::pretrain::evaluate_controller;
use crate::rng::{instance, Rng, Stream};

/// Bounds on the log-ratio before exponentiation.
pub const LOG_RATIO_MIN: f64 = -13.815510557964274; // ln 1e-6
pub const LOG_RATIO_MAX: f64 = 13.815510557964274; // ln 1e6

/// Importance weight assigned to each sampled denoising step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepWeighting {
    /// `1 / (|S| p(k)) = K_ft / |S|`: unbiased for the sum over all steps.
    #[default]
    Unbiased,
    /// `K_ft / (|S| p(k)) = K_ft^2 / |S|`, the literal printed factor.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub n_envs: usize,
    /// Environment steps (action chunks) per env per iteration.
    pub n_steps: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub vf_coef: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Stop the update once the approximate KL exceeds this; 0 disables.
    pub target_kl: f64,
    pub k_finetune: usize,
    /// Denoising steps sampled per environment step, `|S|`.
    pub step_samples: usize,
    pub min_std: f64,
    pub weighting: StepWeighting,
    pub normalize_advantages: bool,
    pub dispersive_in_finetune: bool,
    /// Evaluate every this many iterations; 0 evaluates only at the ends.
    pub eval_every: usize,
    /// Episodes per evaluation; 0 disables evaluation.
    pub eval_episodes: usize,
    pub eval_min_std: f64,
    pub value_hidden: Vec<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            n_envs: 50,
            n_steps: 15,
            gamma: 0.999,
            gae_lambda: 0.95,
            clip: 0.01,
            epochs: 10,
            minibatches: 8,
            vf_coef: 0.5,
            actor_lr: 1e-5,
            critic_lr: 1e-3,
            target_kl: 1.0,
            k_finetune: 10,
            step_samples: 10,
            min_std: 0.1,
            weighting: StepWeighting::Unbiased,
            normalize_advantages: true,
            dispersive_in_finetune: false,
            eval_every: 10,
            eval_episodes: 50,
            eval_min_std: 0.0,
            value_hidden: vec![64, 64],
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda must be in [0, 1], got {}", self.gae_lambda));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if self.step_samples == 0 || self.step_samples > self.k_finetune {
            return bad(format!("step_samples must be in 1..={}, got {}", self.k_finetune, self.step_samples));
        }
        if !(self.min_std > 0.0) {
            return bad(format!("min_std must be positive during fine-tuning, got {}", self.min_std));
        }
        if !(self.eval_min_std >= 0.0) {
            return bad(format!("eval_min_std must be non-negative, got {}", self.eval_min_std));
        }
        if self.n_envs == 0 || self.n_steps == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("n_envs, n_steps, epochs and minibatches must be positive".into());
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0 && self.vf_coef >= 0.0 && self.target_kl >= 0.0) {
            return bad("learning rates, vf_coef and target_kl must be non-negative".into());
        }
        Ok(())
    }
}

/// One environment step of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Normalized observation the chain was conditioned on.
    pub obs: Vec<f64>,
    pub chain: DenoisingChain,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub value: f64,
    /// Per-transition log-probabilities under the collecting parameters.
    pub old_log_probs: Vec<f64>,
}

/// Steps of all environments, env-major, plus GAE outputs once computed.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub steps: Vec<StepRecord>,
    /// Range of `steps` owned by each environment.
    pub env_ranges: Vec<Range<usize>>,
    /// Value of the observation after each environment's last step, 0 if it
    /// ended an episode.
    pub bootstrap: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean return and success rate of episodes finished during collection.
    pub fn episode_stats(&self) -> (Option<f64>, Option<f64>) {
        let n = self.episode_returns.len();
        if n == 0 {
            return (None, None);
        }
        let ret = self.episode_returns.iter().sum::<f64>() / n as f64;
        let succ = self.episode_successes.iter().filter(|&&s| s).count() as f64 / n as f64;
        (Some(ret), Some(succ))
    }
}

/// Per-row inputs of the transition log-density on a graph.
struct StepRows {
    obs: Tensor,
    noisy: Tensor,
    net_timesteps: Vec<usize>,
    timesteps: Vec<usize>,
    /// `a^{k-1} - a^k / sqrt(alpha_k)`.
    base: Tensor,
    /// `beta_k / (sqrt(alpha_k) sqrt(1 - alpha_bar_k))`, multiplying eps.
    coef: Tensor,
    /// `-1 / (2 std^2)`.
    neg_half_precision: Tensor,
    /// `-d/2 ln(2 pi std^2)`.
    norm: Tensor,
}

/// `(obs, chain, transition index)` triples to evaluate.
type StepRef<'a> = (&'a [f64], &'a DenoisingChain, usize);

fn step_rows(items: &[StepRef<'_>], sched: &NoiseSchedule) -> Result<StepRows> {
    let (mut obs, mut noisy, mut base) = (Vec::new(), Vec::new(), Vec::new());
    let (mut coef, mut nhp, mut norm) = (Vec::new(), Vec::new(), Vec::new());
    let (mut net_timesteps, mut timesteps) = (Vec::new(), Vec::new());
    for &(o, chain, j) in items {
        if chain.transitions() != sched.steps() {
            return Err(Error::InvalidArgument(format!(
                "chain has {} transitions, schedule has {} steps",
                chain.transitions(),
                sched.steps()
            )));
        }
        let k = chain.timestep(j);
        let std = chain.stds[j];
        if !(std > 0.0) {
            return Err(Error::InvalidArgument(format!("transition at step {k} is deterministic")));
        }
        let c1 = 1.0 / sched.alpha(k)?.sqrt();
        let c2 = sched.beta(k)? / (1.0 - sched.alpha_bar(k)?).sqrt();
        let (ak, prev) = (&chain.states[j], &chain.states[j + 1]);
        let var = std * std;
        obs.push(o.to_vec());
        noisy.push(ak.clone());
        base.push(prev.iter().zip(ak).map(|(p, a)| p - c1 * a).collect::<Vec<_>>());
        coef.push([c1 * c2]);
        nhp.push([-1.0 / (2.0 * var)]);
        norm.push([-0.5 * ak.len() as f64 * (2.0 * std::f64::consts::PI * var).ln()]);
        net_timesteps.push(sched.net_timestep(k)?);
        timesteps.push(k);
    }
    Ok(StepRows {
        obs: Tensor::from_rows(&obs)?,
        noisy: Tensor::from_rows(&noisy)?,
        net_timesteps,
        timesteps,
        base: Tensor::from_rows(&base)?,
        coef: Tensor::from_rows(&coef)?,
        neg_half_precision: Tensor::from_rows(&nhp)?,
        norm: Tensor::from_rows(&norm)?,
    })
}

/// `[R, 1]` transition log-densities given predicted noise `eps: [R, d]`.
fn step_logprob_node(g: &mut Graph, eps: NodeId, rows: &StepRows) -> Result<NodeId> {
    let coef = g.constant(rows.coef.clone());
    let scaled = g.mul_col(eps, coef)?;
    let base = g.constant(rows.base.clone());
    let resid = g.add(base, scaled)?;
    let sq = g.square(resid)?;
    let ss = g.row_sum(sq)?;
    let nhp = g.constant(rows.neg_half_precision.clone());
    let quad = g.mul(ss, nhp)?;
    let norm = g.constant(rows.norm.clone());
    Ok(g.add(norm, quad)?)
}

/// Log-densities of the given transitions under `denoiser`, without a tape
/// for the parameters.
fn transition_logprobs(denoiser: &DenoiserParams, items: &[StepRef<'_>], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let rows = step_rows(items, sched)?;
    let mut g = Graph::new();
    let bound = denoiser.bind(&mut g, false);
    let noisy = g.constant(rows.noisy.clone());
    let obs = g.constant(rows.obs.clone());
    let out = bound.forward(&mut g, noisy, obs, &rows.net_timesteps)?;
    let lp = step_logprob_node(&mut g, out.eps, &rows)?;
    Ok(g.value(lp).data().to_vec())
}

/// Recomputes the log-density of every transition of `chain` under
/// `denoiser`, in chain order. Deterministic transitions score 0.
pub fn chain_logprob(
    denoiser: &DenoiserParams,
    chain: &DenoisingChain,
    obs: &[f64],
    sched: &NoiseSchedule,
    min_std: f64,
) -> Result<Vec<f64>> {
    if chain.transitions() != sched.steps() || chain.states.len() != sched.steps() + 1 {
        return Err(Error::InvalidArgument(format!(
            "chain has {} transitions, schedule has {} steps",
            chain.transitions(),
            sched.steps()
        )));
    }
    for j in 0..chain.transitions() {
        let std = effective_std(sched, chain.timestep(j), min_std)?;
        if std != chain.stds[j] {
            return Err(Error::InvalidArgument(format!(
                "chain std {} at step {} does not match schedule std {std}",
                chain.stds[j],
                chain.timestep(j)
            )));
        }
    }
    let live: Vec<usize> = (0..chain.transitions()).filter(|&j| chain.stds[j] > 0.0).collect();
    let mut out = vec![0.0; chain.transitions()];
    if live.is_empty() {
        return Ok(out);
    }
    let items: Vec<StepRef<'_>> = live.iter().map(|&j| (obs, chain, j)).collect();
    for (j, lp) in live.into_iter().zip(transition_logprobs(denoiser, &items, sched)?) {
        out[j] = lp;
    }
    Ok(out)
}

/// `exp(new - old)` with the log-ratio clamped to `[ln 1e-6, ln 1e6]`.
pub fn prob_ratio(new_logp: f64, old_logp: f64) -> f64 {
    (new_logp - old_logp).clamp(LOG_RATIO_MIN, LOG_RATIO_MAX).exp()
}

/// Per-term PPO objective `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_objective(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// Nodes of the per-term clipped objective.
#[derive(Clone, Copy, Debug)]
pub struct ClippedTerms {
    pub log_ratio: NodeId,
    pub ratio: NodeId,
    pub objective: NodeId,
}

/// Elementwise `min(r A, clip(r, 1 - clip, 1 + clip) A)` with
/// `r = exp(clamp(new - old))`. Ties route the gradient to the unclipped
/// branch.
pub fn clipped_objective_node(g: &mut Graph, new_logp: NodeId, old_logp: NodeId, adv: NodeId, clip: f64) -> Result<ClippedTerms> {
    let log_ratio = g.sub(new_logp, old_logp)?;
    let log_ratio = g.clamp(log_ratio, LOG_RATIO_MIN, LOG_RATIO_MAX)?;
    let ratio = g.exp(log_ratio)?;
    let unclipped = g.mul(ratio, adv)?;
    let clipped_ratio = g.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let clipped = g.mul(clipped_ratio, adv)?;
    let objective = g.minimum(unclipped, clipped)?;
    Ok(ClippedTerms { log_ratio, ratio, objective })
}

/// Samples `size` distinct schedule indices from `1..=k_ft` uniformly and
/// returns them ascending with their importance weights.
pub fn sample_denoise_steps(k_ft: usize, size: usize, weighting: StepWeighting, rng: &mut Rng) -> Result<Vec<(usize, f64)>> {
    if size == 0 || size > k_ft {
        return Err(Error::InvalidArgument(format!("step sample size {size} not in 1..={k_ft}")));
    }
    let w = match weighting {
        StepWeighting::Unbiased => k_ft as f64 / size as f64,
        StepWeighting::Literal => (k_ft * k_ft) as f64 / size as f64,
    };
    let mut ks: Vec<usize> = if size == k_ft {
        (1..=k_ft).collect()
    } else {
        index::sample(rng, k_ft, size).into_iter().map(|i| i + 1).collect()
    };
    ks.sort_unstable();
    Ok(ks.into_iter().map(|k| (k, w)).collect())
}

/// GAE over one environment's steps. `bootstrap` is the value after the
/// last step, used only if that step did not end an episode.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Shape(format!("gae: {n} rewards, {} values, {} dones", values.len(), dones.len())));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Fills advantages and returns of the buffer; advantages are optionally
/// normalized to zero mean and unit variance over the whole buffer.
pub fn compute_gae(buf: &mut RolloutBuffer, gamma: f64, lambda: f64, normalize: bool) -> Result<()> {
    if buf.is_empty() {
        return Err(Error::InvalidArgument("empty rollout buffer".into()));
    }
    let mut adv = Vec::with_capacity(buf.len());
    let mut ret = Vec::with_capacity(buf.len());
    for (r, &boot) in buf.env_ranges.iter().zip(&buf.bootstrap) {
        let s = &buf.steps[r.clone()];
        let rewards: Vec<f64> = s.iter().map(|x| x.reward).collect();
        let values: Vec<f64> = s.iter().map(|x| x.value).collect();
        let dones: Vec<bool> = s.iter().map(|x| x.done).collect();
        let (a, rt) = gae(&rewards, &values, &dones, boot, gamma, lambda)?;
        adv.extend(a);
        ret.extend(rt);
    }
    if normalize && adv.len() > 1 {
        normalize_in_place(&mut adv);
    }
    if !adv.iter().chain(&ret).all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite advantages".into()));
    }
    buf.advantages = adv;
    buf.returns = ret;
    Ok(())
}

fn normalize_in_place(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) / (std + 1e-8);
    }
}

/// What a rollout needs besides the parameters.
#[derive(Clone, Copy, Debug)]
pub struct RolloutSetup<'a> {
    pub spec: &'a EnvSpec,
    pub normalizer: &'a ObsNormalizer,
    pub sched: &'a NoiseSchedule,
    pub n_envs: usize,
    pub n_steps: usize,
    pub min_std: f64,
    pub exec: Execution,
}

struct EnvRollout {
    steps: Vec<StepRecord>,
    bootstrap: f64,
    episodes: Vec<(f64, bool)>,
}

/// Runs `n_envs` environments for `n_steps` chunks each, resetting finished
/// episodes. Env `e` draws resets and chain noise from streams keyed by
/// `(seed, e)`.
pub fn collect_rollouts(
    denoiser: &DenoiserParams,
    value: &ValueParams,
    setup: &RolloutSetup<'_>,
    seed: u64,
) -> Result<RolloutBuffer> {
    if setup.n_envs == 0 || setup.n_steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one env and one step".into()));
    }
    let per_env = map_indexed(setup.exec, setup.n_envs, |e| {
        run_env(denoiser, value, setup, seed, e).map_err(|err| match err {
            Error::Env { .. } => err,
            other => Error::Env { env_index: e, message: other.to_string() },
        })
    });
    let mut buf = RolloutBuffer {
        steps: Vec::new(),
        env_ranges: Vec::new(),
        bootstrap: Vec::new(),
        episode_returns: Vec::new(),
        episode_successes: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    for r in per_env {
        let r = r?;
        let start = buf.steps.len();
        buf.steps.extend(r.steps);
        buf.env_ranges.push(start..buf.steps.len());
        buf.bootstrap.push(r.bootstrap);
        for (ret, succ) in r.episodes {
            buf.episode_returns.push(ret);
            buf.episode_successes.push(succ);
        }
    }
    Ok(buf)
}

fn run_env(denoiser: &DenoiserParams, value: &ValueParams, setup: &RolloutSetup<'_>, seed: u64, e: usize) -> Result<EnvRollout> {
    let spec = setup.spec;
    let mut reset = instance(seed, e as u64, Stream::EnvReset);
    let mut noise = instance(seed, e as u64, Stream::Policy);
    let mut state = EnvState::reset(spec, &mut reset);
    let mut steps = Vec::with_capacity(setup.n_steps);
    let mut episodes = Vec::new();
    let mut ep_return = 0.0;
    for _ in 0..setup.n_steps {
        let obs = setup.normalizer.apply(&state.observe(spec));
        let chain = sample_chain(denoiser, &obs, setup.sched, setup.min_std, &mut noise)?;
        let tr = state.step(spec, chain.action())?;
        ep_return += tr.reward;
        if tr.done {
            episodes.push((ep_return, tr.success));
            ep_return = 0.0;
            state = EnvState::reset(spec, &mut reset);
        }
        steps.push(StepRecord {
            obs,
            chain,
            reward: tr.reward,
            done: tr.done,
            success: tr.success,
            value: 0.0,
            old_log_probs: Vec::new(),
        });
    }
    let last_done = steps.last().is_some_and(|s| s.done);
    let mut value_obs: Vec<&[f64]> = steps.iter().map(|s| s.obs.as_slice()).collect();
    let tail = setup.normalizer.apply(&state.observe(spec));
    value_obs.push(&tail);
    let values = value.forward(&Tensor::from_rows(&value_obs)?)?;
    let items: Vec<StepRef<'_>> = steps
        .iter()
        .flat_map(|s| (0..s.chain.transitions()).map(move |j| (s.obs.as_slice(), &s.chain, j)))
        .collect();
    let old = transition_logprobs(denoiser, &items, setup.sched)?;
    let k = setup.sched.steps();
    for (i, s) in steps.iter_mut().enumerate() {
        s.value = values[i];
        s.old_log_probs = old[i * k..(i + 1) * k].to_vec();
    }
    let bootstrap = if last_done { 0.0 } else { values[steps.len()] };
    Ok(EnvRollout { steps, bootstrap, episodes })
}

/// Loss pieces and gradients of one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct MinibatchEval {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub disp_loss: f64,
    pub total: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub actor_grads: Vec<Vec<f64>>,
    pub critic_grads: Vec<Vec<f64>>,
}

/// Settings of the PPO loss.
#[derive(Clone, Copy, Debug)]
pub struct LossSettings<'a> {
    pub clip: f64,
    pub vf_coef: f64,
    pub disp: Option<&'a DispersiveConfig>,
}

/// PPO loss on buffer entries `idx`, where `steps[i]` lists the sampled
/// schedule indices and weights of entry `idx[i]`:
///
/// `-(1/M) sum_t (1/K) sum_{k in S_t} w_k min(r A, clip(r) A)
///  + c1 (1/M) sum_t (V(s_t) - R_t)^2`,
///
/// with `K` the chain length, so the policy term estimates the mean over
/// denoising steps.
pub fn minibatch_loss(
    denoiser: &DenoiserParams,
    value: &ValueParams,
    buf: &RolloutBuffer,
    idx: &[usize],
    steps: &[Vec<(usize, f64)>],
    sched: &NoiseSchedule,
    settings: &LossSettings<'_>,
) -> Result<MinibatchEval> {
    if idx.is_empty() || idx.len() != steps.len() {
        return Err(Error::InvalidArgument(format!("{} buffer entries with {} step sets", idx.len(), steps.len())));
    }
    if buf.advantages.len() != buf.len() {
        return Err(Error::InvalidArgument("advantages not computed".into()));
    }
    let k_total = sched.steps();
    let m = idx.len() as f64;
    let mut items = Vec::new();
    let (mut old, mut adv, mut weight) = (Vec::new(), Vec::new(), Vec::new());
    for (&i, set) in idx.iter().zip(steps) {
        let s = &buf.steps[i];
        for &(k, w) in set {
            if k == 0 || k > k_total {
                return Err(Error::InvalidArgument(format!("denoising step {k} out of 1..={k_total}")));
            }
            let j = k_total - k;
            items.push((s.obs.as_slice(), &s.chain, j));
            old.push([s.old_log_probs[j]]);
            adv.push([buf.advantages[i]]);
            weight.push([w / (k_total as f64 * m)]);
        }
    }
    let rows = step_rows(&items, sched)?;
    let mut g = Graph::new();
    let actor = denoiser.bind(&mut g, true);
    let critic_ids = value.params.bind(&mut g, true);
    let noisy = g.constant(rows.noisy.clone());
    let obs = g.constant(rows.obs.clone());
    let out = actor.forward(&mut g, noisy, obs, &rows.net_timesteps)?;
    let logp = step_logprob_node(&mut g, out.eps, &rows)?;
    let old = g.constant(Tensor::from_rows(&old)?);
    let adv = g.constant(Tensor::from_rows(&adv)?);
    let ClippedTerms { log_ratio, ratio, objective } = clipped_objective_node(&mut g, logp, old, adv, settings.clip)?;
    let weight = g.constant(Tensor::from_rows(&weight)?);
    let weighted = g.mul(objective, weight)?;
    let total_obj = g.sum(weighted)?;
    let policy_loss = g.scale(total_obj, -1.0)?;

    let vobs: Vec<&[f64]> = idx.iter().map(|&i| buf.steps[i].obs.as_slice()).collect();
    let vobs = g.constant(Tensor::from_rows(&vobs)?);
    let v = value.forward_graph(&mut g, &critic_ids, vobs)?;
    let targets: Vec<[f64; 1]> = idx.iter().map(|&i| [buf.returns[i]]).collect();
    let targets = g.constant(Tensor::from_rows(&targets)?);
    let verr = g.sub(v, targets)?;
    let vsq = g.square(verr)?;
    let value_loss = g.mean(vsq)?;
    let vterm = g.scale(value_loss, settings.vf_coef)?;
    let mut total = g.add(policy_loss, vterm)?;

    let mut disp_loss = 0.0;
    if let Some(cfg) = settings.disp {
        if let Some(d) = disp_over_timesteps_node(&mut g, out.hook(), &rows.timesteps, cfg)? {
            disp_loss = g.scalar_value(d);
            let wd = g.scale(d, cfg.lambda)?;
            total = g.add(total, wd)?;
        }
    }

    let ratios = g.value(ratio).data();
    let lrs = g.value(log_ratio).data();
    let n = ratios.len() as f64;
    let mean_ratio = ratios.iter().sum::<f64>() / n;
    let clip_fraction = ratios.iter().filter(|r| (*r - 1.0).abs() > settings.clip).count() as f64 / n;
    let approx_kl = ratios.iter().zip(lrs).map(|(r, lr)| (r - 1.0) - lr).sum::<f64>() / n;
    let grads = g.backward(total)?;
    Ok(MinibatchEval {
        policy_loss: g.scalar_value(policy_loss),
        value_loss: g.scalar_value(value_loss),
        disp_loss,
        total: g.scalar_value(total),
        mean_ratio,
        clip_fraction,
        approx_kl,
        actor_grads: ParamSet::collect_grads(&actor.ids, &grads),
        critic_grads: ParamSet::collect_grads(&critic_ids, &grads),
    })
}

/// Trainable state of fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneState {
    pub denoiser: DenoiserParams,
    pub value: ValueParams,
    pub actor_opt: AdamW,
    pub critic_opt: AdamW,
    pub iteration: u64,
    pub seed: u64,
}

impl FinetuneState {
    pub fn new(denoiser: DenoiserParams, value: ValueParams, cfg: &FinetuneConfig, seed: u64) -> Self {
        let actor_opt = AdamW::new(AdamWConfig { lr: cfg.actor_lr, ..AdamWConfig::default() }, &denoiser.params);
        let critic_opt = AdamW::new(AdamWConfig { lr: cfg.critic_lr, ..AdamWConfig::default() }, &value.params);
        Self { denoiser, value, actor_opt, critic_opt, iteration: 0, seed }
    }

    /// Seed of the streams used by the next iteration.
    pub fn iteration_seed(&self) -> u64 {
        self.seed ^ self.iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Averages over the minibatches of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
    pub early_stopped: bool,
}

/// PPO epochs over `buf`. Minibatch order comes from the `Update` stream
/// and step subsets from the `Steps` stream, both keyed by `seed`. On a
/// non-finite loss the state is restored and the error returned.
pub fn ppo_update(
    state: &mut FinetuneState,
    buf: &RolloutBuffer,
    sched: &NoiseSchedule,
    cfg: &FinetuneConfig,
    disp: &DispersiveConfig,
    seed: u64,
) -> Result<UpdateMetrics> {
    let backup = state.clone();
    let result = ppo_epochs(state, buf, sched, cfg, disp, seed);
    if result.is_err() {
        *state = backup;
    }
    result
}

fn ppo_epochs(
    state: &mut FinetuneState,
    buf: &RolloutBuffer,
    sched: &NoiseSchedule,
    cfg: &FinetuneConfig,
    disp: &DispersiveConfig,
    seed: u64,
) -> Result<UpdateMetrics> {
    if buf.is_empty() {
        return Err(Error::InvalidArgument("empty rollout buffer".into()));
    }
    let settings = LossSettings {
        clip: cfg.clip,
        vf_coef: cfg.vf_coef,
        disp: cfg.dispersive_in_finetune.then_some(disp),
    };
    let n = buf.len();
    let parts = cfg.minibatches.min(n);
    let mut acc = UpdateMetrics::default();
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut instance(seed, epoch as u64, Stream::Update));
        for mb in 0..parts {
            let idx = &order[mb * n / parts..(mb + 1) * n / parts];
            let mut rng = instance(seed, (epoch * parts + mb) as u64, Stream::Steps);
            let steps = idx
                .iter()
                .map(|_| sample_denoise_steps(sched.steps(), cfg.step_samples, cfg.weighting, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let eval = minibatch_loss(&state.denoiser, &state.value, buf, idx, &steps, sched, &settings)
                .map_err(|e| match e {
                    Error::Autodiff(AutodiffError::NonFinite { .. }) => Error::NonFiniteLoss { batch_seed: seed },
                    other => other,
                })?;
            let finite = eval.total.is_finite()
                && eval.actor_grads.iter().chain(&eval.critic_grads).flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFiniteLoss { batch_seed: seed });
            }
            if cfg.target_kl > 0.0 && eval.approx_kl > cfg.target_kl {
                acc.early_stopped = true;
                break 'epochs;
            }
            state.actor_opt.update(&mut state.denoiser.params, &eval.actor_grads);
            state.critic_opt.update(&mut state.value.params, &eval.critic_grads);
            acc.policy_loss += eval.policy_loss;
            acc.value_loss += eval.value_loss;
            acc.mean_ratio += eval.mean_ratio;
            acc.clip_fraction += eval.clip_fraction;
            acc.approx_kl += eval.approx_kl;
            acc.minibatches += 1;
        }
    }
    if acc.minibatches > 0 {
        let c = acc.minibatches as f64;
        acc.policy_loss /= c;
        acc.value_loss /= c;
        acc.mean_ratio /= c;
        acc.clip_fraction /= c;
        acc.approx_kl /= c;
    }
    Ok(acc)
}

/// One metrics row of fine-tuning. Row 0 holds the starting evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRow {
    pub iteration: u64,
    pub mean_return: Option<f64>,
    pub train_success: Option<f64>,
    pub update: Option<UpdateMetrics>,
    pub eval_success: Option<f64>,
}

/// Everything `run_finetune` needs besides the starting state.
pub struct FinetuneSetup<'a> {
    pub config: &'a FinetuneConfig,
    pub spec: &'a EnvSpec,
    pub normalizer: &'a ObsNormalizer,
    /// Fine-tuning schedule, already subsampled.
    pub sched: &'a NoiseSchedule,
    pub disp: &'a DispersiveConfig,
    pub exec: Execution,
}

pub struct FinetuneOutcome {
    pub state: FinetuneState,
    pub rows: Vec<FinetuneRow>,
    /// Success rate before the first update, when evaluation is enabled.
    pub initial_eval: Option<f64>,
    /// Parameters with the highest evaluation success (earliest on ties).
    pub best: Option<(DenoiserParams, f64, u64)>,
}

/// Success rate of `denoiser` on the fixed fine-tuning evaluation episodes.
pub fn evaluate_finetune(setup: &FinetuneSetup<'_>, denoiser: &DenoiserParams, seed: u64) -> Result<Option<f64>> {
    let cfg = setup.config;
    if cfg.eval_episodes == 0 {
        return Ok(None);
    }
    let policy = DiffusionPolicy { denoiser, normalizer: setup.normalizer, sched: setup.sched, min_std: cfg.eval_min_std };
    let eval_seed = seed ^ u64::MAX.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    Ok(Some(evaluate_controller(&policy, setup.spec, cfg.eval_episodes, eval_seed, setup.exec)?.success_rate))
}

/// Alternates rollout collection, GAE and PPO updates for
/// `config.iterations` iterations, evaluating at the start, every
/// `eval_every` iterations and at the end.
pub fn run_finetune(
    setup: &FinetuneSetup<'_>,
    mut state: FinetuneState,
    mut on_row: impl FnMut(&FinetuneRow) -> Result<()>,
) -> Result<FinetuneOutcome> {
    let cfg = setup.config;
    cfg.validate()?;
    if setup.sched.steps() != cfg.k_finetune {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} steps, config expects {}",
            setup.sched.steps(),
            cfg.k_finetune
        )));
    }
    if state.denoiser.config.obs_dim != setup.spec.obs_dim || state.denoiser.config.chunk_dim() != setup.spec.chunk_dim() {
        return Err(Error::InvalidArgument("denoiser does not match the environment".into()));
    }
    let rollout = RolloutSetup {
        spec: setup.spec,
        normalizer: setup.normalizer,
        sched: setup.sched,
        n_envs: cfg.n_envs,
        n_steps: cfg.n_steps,
        min_std: cfg.min_std,
        exec: setup.exec,
    };
    let mut rows = Vec::new();
    let initial_eval = evaluate_finetune(setup, &state.denoiser, state.seed)?;
    let mut best = initial_eval.map(|s| (state.denoiser.clone(), s, state.iteration));
    let row = FinetuneRow { iteration: state.iteration, mean_return: None, train_success: None, update: None, eval_success: initial_eval };
    on_row(&row)?;
    rows.push(row);
    let start = state.iteration;
    let end = start + cfg.iterations as u64;
    while state.iteration < end {
        let seed = state.iteration_seed();
        let mut buf = collect_rollouts(&state.denoiser, &state.value, &rollout, seed)?;
        compute_gae(&mut buf, cfg.gamma, cfg.gae_lambda, cfg.normalize_advantages)?;
        let update = ppo_update(&mut state, &buf, setup.sched, cfg, setup.disp, seed)?;
        state.iteration += 1;
        let it = state.iteration;
        let eval_now = it == end || (cfg.eval_every > 0 && (it - start) % cfg.eval_every as u64 == 0);
        let eval_success = if eval_now { evaluate_finetune(setup, &state.denoiser, state.seed)? } else { None };
        if let Some(s) = eval_success {
            if best.as_ref().is_none_or(|b| s > b.1) {
                best = Some((state.denoiser.clone(), s, it));
            }
        }
        let (mean_return, train_success) = buf.episode_stats();
        let row = FinetuneRow { iteration: it, mean_return, train_success, update: Some(update), eval_success };
        on_row(&row)?;
        rows.push(row);
    }
    Ok(FinetuneOutcome { state, rows, initial_eval, best })
}
