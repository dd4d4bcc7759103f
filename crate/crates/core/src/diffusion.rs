//! DDPM noise schedules, forward noising, the reverse-mean
//! parameterization, stochastic reverse steps and chain sampling.
//!
//! Schedule indices are 1-based: `k = 1..=K`, with `alpha_bar(0) = 1`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::networks::DenoiserParams;
use crate::rng::Rng;

/// Per-step variance of the reverse transitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// `beta_k (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k)`.
    #[default]
    Posterior,
    /// `beta_k`.
    Beta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    variances: Vec<f64>,
    net_timesteps: Vec<usize>,
    variance: VarianceKind,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit `beta_1..beta_K`.
    pub fn from_betas(betas: Vec<f64>, variance: VarianceKind) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let net_timesteps = (1..=betas.len()).collect();
        Ok(Self::from_tables(betas, alphas, alpha_bars, net_timesteps, variance))
    }

    fn from_tables(
        betas: Vec<f64>,
        alphas: Vec<f64>,
        alpha_bars: Vec<f64>,
        net_timesteps: Vec<usize>,
        variance: VarianceKind,
    ) -> Self {
        let variances = (0..betas.len())
            .map(|i| match variance {
                VarianceKind::Beta => betas[i],
                VarianceKind::Posterior => {
                    let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                    betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
                }
            })
            .collect();
        Self { betas, alphas, alpha_bars, variances, net_timesteps, variance }
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn variance_kind(&self) -> VarianceKind {
        self.variance
    }

    fn idx(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {k} outside 1..={}", self.steps())));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(self.betas[self.idx(k)?])
    }

    pub fn alpha(&self, k: usize) -> Result<f64> {
        Ok(self.alphas[self.idx(k)?])
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.idx(k)?])
    }

    pub fn variance(&self, k: usize) -> Result<f64> {
        Ok(self.variances[self.idx(k)?])
    }

    /// Timestep fed to the denoiser at schedule index `k`. Differs from `k`
    /// only for subsampled schedules, which keep the original network index.
    pub fn net_timestep(&self, k: usize) -> Result<usize> {
        Ok(self.net_timesteps[self.idx(k)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }
}

/// Linear `beta` from `beta_start` to `beta_end` with posterior variances.
pub fn make_schedule(k: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    make_schedule_with(k, beta_start, beta_end, VarianceKind::Posterior)
}

pub fn make_schedule_with(k: usize, beta_start: f64, beta_end: f64, variance: VarianceKind) -> Result<NoiseSchedule> {
    if k == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if k == 1 {
        vec![beta_start]
    } else {
        (0..k).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64).collect()
    };
    NoiseSchedule::from_betas(betas, variance)
}

/// Keeps every `K / k_ft`-th step. The kept `alpha_bar` values are copied
/// from the original table and the per-step factors are the ratios between
/// consecutive kept entries.
pub fn subsample_schedule(sched: &NoiseSchedule, k_ft: usize) -> Result<NoiseSchedule> {
    let k = sched.steps();
    if k_ft == 0 || k % k_ft != 0 {
        return Err(Error::InvalidArgument(format!("{k_ft} does not divide {k}")));
    }
    let stride = k / k_ft;
    if stride == 1 {
        return Ok(sched.clone());
    }
    let mut betas = Vec::with_capacity(k_ft);
    let mut alphas = Vec::with_capacity(k_ft);
    let mut alpha_bars = Vec::with_capacity(k_ft);
    let mut net_timesteps = Vec::with_capacity(k_ft);
    for j in 1..=k_ft {
        let kj = j * stride;
        let ratio = sched.alpha_bar(kj)? / sched.alpha_bar(kj - stride)?;
        alphas.push(ratio);
        betas.push(1.0 - ratio);
        alpha_bars.push(sched.alpha_bar(kj)?);
        net_timesteps.push(sched.net_timestep(kj)?);
    }
    Ok(NoiseSchedule::from_tables(betas, alphas, alpha_bars, net_timesteps, sched.variance))
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// `sqrt(alpha_bar_k) a0 + sqrt(1 - alpha_bar_k) eps`.
pub fn forward_noise(a0: &[f64], k: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(a0, eps, "forward_noise")?;
    let ab = sched.alpha_bar(sched.idx(k)? + 1)?;
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| s * a + n * e).collect())
}

/// `(a - beta_k / sqrt(1 - alpha_bar_k) eps_hat) / sqrt(alpha_k)`.
pub fn reverse_mean(ak: &[f64], eps_hat: &[f64], k: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(ak, eps_hat, "reverse_mean")?;
    let one_minus = 1.0 - sched.alpha_bar(k)?;
    if one_minus <= 0.0 {
        return Err(Error::InvalidArgument(format!("1 - alpha_bar is {one_minus} at timestep {k}")));
    }
    let c1 = 1.0 / sched.alpha(k)?.sqrt();
    let c2 = sched.beta(k)? / one_minus.sqrt();
    Ok(ak.iter().zip(eps_hat).map(|(a, e)| c1 * (a - c2 * e)).collect())
}

/// Isotropic Gaussian log-density of `x` under `N(mu, std^2 I)`.
pub fn gaussian_logprob(x: &[f64], mu: &[f64], std: f64) -> f64 {
    let var = std * std;
    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
}

/// Standard deviation used by the reverse step at `k`.
pub fn effective_std(sched: &NoiseSchedule, k: usize, min_std: f64) -> Result<f64> {
    Ok(sched.variance(k)?.sqrt().max(min_std))
}

/// One sampled reverse transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSample {
    pub next: Vec<f64>,
    pub log_prob: f64,
    pub std: f64,
}

/// Reverse step with caller-supplied standard-normal noise `z`. A zero
/// effective std makes the step deterministic; its log-probability is
/// recorded as 0.
pub fn reverse_step_with_noise(mu: &[f64], z: &[f64], k: usize, sched: &NoiseSchedule, min_std: f64) -> Result<StepSample> {
    same_len(mu, z, "reverse_step")?;
    if !(min_std >= 0.0) {
        return Err(Error::InvalidArgument(format!("min_std {min_std} is negative")));
    }
    let std = effective_std(sched, k, min_std)?;
    if std == 0.0 {
        return Ok(StepSample { next: mu.to_vec(), log_prob: 0.0, std });
    }
    let next: Vec<f64> = mu.iter().zip(z).map(|(m, z)| m + std * z).collect();
    let log_prob = gaussian_logprob(&next, mu, std);
    Ok(StepSample { next, log_prob, std })
}

pub fn reverse_step(mu: &[f64], k: usize, sched: &NoiseSchedule, min_std: f64, rng: &mut Rng) -> Result<StepSample> {
    let z = standard_normal(rng, mu.len());
    reverse_step_with_noise(mu, &z, k, sched, min_std)
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Noise predictor for a single observation.
pub trait EpsModel {
    fn chunk_dim(&self) -> usize;
    fn eps(&self, noisy: &[f64], obs: &[f64], net_timestep: usize) -> Result<Vec<f64>>;
}

impl EpsModel for DenoiserParams {
    fn chunk_dim(&self) -> usize {
        self.config.chunk_dim()
    }

    fn eps(&self, noisy: &[f64], obs: &[f64], net_timestep: usize) -> Result<Vec<f64>> {
        let noisy = Tensor::matrix(1, noisy.len(), noisy.to_vec())?;
        let obs = Tensor::matrix(1, obs.len(), obs.to_vec())?;
        Ok(self.predict(&noisy, &obs, &[net_timestep])?.0.into_data())
    }
}

/// States `a^K ... a^0` of one sampled chain. Transition `j` maps
/// `states[j]` to `states[j + 1]` at schedule index `K - j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingChain {
    pub states: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    /// Standard-normal draws of each transition.
    pub noises: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl DenoisingChain {
    pub fn transitions(&self) -> usize {
        self.log_probs.len()
    }

    /// The executed chunk `a^0`.
    pub fn action(&self) -> &[f64] {
        self.states.last().expect("chain has at least one state")
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Schedule index of transition `j`.
    pub fn timestep(&self, j: usize) -> usize {
        self.transitions() - j
    }
}

/// Draws `a^K ~ N(0, I)` and denoises it down to `a^0`.
pub fn sample_chain<M: EpsModel + ?Sized>(
    model: &M,
    obs: &[f64],
    sched: &NoiseSchedule,
    min_std: f64,
    rng: &mut Rng,
) -> Result<DenoisingChain> {
    let k_total = sched.steps();
    let mut chain = DenoisingChain {
        states: Vec::with_capacity(k_total + 1),
        means: Vec::with_capacity(k_total),
        log_probs: Vec::with_capacity(k_total),
        noises: Vec::with_capacity(k_total),
        stds: Vec::with_capacity(k_total),
    };
    chain.states.push(standard_normal(rng, model.chunk_dim()));
    for k in (1..=k_total).rev() {
        let a = chain.states.last().unwrap();
        let eps = model.eps(a, obs, sched.net_timestep(k)?)?;
        let mu = reverse_mean(a, &eps, k, sched)?;
        let z = standard_normal(rng, mu.len());
        let step = reverse_step_with_noise(&mu, &z, k, sched, min_std)?;
        if !step.next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteChain { what: "state", step: k });
        }
        if !step.log_prob.is_finite() {
            return Err(Error::NonFiniteChain { what: "log-probability", step: k });
        }
        chain.means.push(mu);
        chain.log_probs.push(step.log_prob);
        chain.noises.push(z);
        chain.stds.push(step.std);
        chain.states.push(step.next);
    }
    Ok(chain)
}

/// Per-row timesteps, noise and noised chunks for one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch {
    /// Schedule index per row.
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
    pub noisy: Tensor,
}

impl NoisedBatch {
    /// Draws all timesteps first, then all noise, row by row.
    pub fn sample(actions: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Self> {
        let (rows, cols) = actions.dims2().ok_or_else(|| Error::Shape("actions must be a matrix".into()))?;
        if rows == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let timesteps: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=sched.steps())).collect();
        let noise = standard_normal(rng, rows * cols);
        let mut noisy = Vec::with_capacity(rows * cols);
        for (i, &k) in timesteps.iter().enumerate() {
            noisy.extend(forward_noise(actions.row(i), k, &noise[i * cols..(i + 1) * cols], sched)?);
        }
        Ok(Self {
            timesteps,
            noise: Tensor::matrix(rows, cols, noise)?,
            noisy: Tensor::matrix(rows, cols, noisy)?,
        })
    }

    pub fn net_timesteps(&self, sched: &NoiseSchedule) -> Result<Vec<usize>> {
        self.timesteps.iter().map(|&k| sched.net_timestep(k)).collect()
    }
}

/// Mean over rows of `||eps - eps_hat||^2`.
pub fn ddpm_loss_node(g: &mut Graph, eps_hat: NodeId, noise: NodeId) -> Result<NodeId> {
    let rows = g.value(noise).rows();
    let d = g.sub(eps_hat, noise)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 1.0 / rows as f64)?)
}

/// Batched noise predictor on a graph.
pub trait NoisePredictor {
    fn predict_eps(&self, g: &mut Graph, noisy: NodeId, obs: NodeId, net_timesteps: &[usize]) -> Result<NodeId>;
}

impl NoisePredictor for DenoiserParams {
    fn predict_eps(&self, g: &mut Graph, noisy: NodeId, obs: NodeId, net_timesteps: &[usize]) -> Result<NodeId> {
        let bound = self.bind(g, false);
        Ok(bound.forward(g, noisy, obs, net_timesteps)?.eps)
    }
}

/// Diffusion loss of `predictor` on `(obs, actions)` rows.
pub fn ddpm_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    obs: &Tensor,
    actions: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    if obs.rows() != actions.rows() {
        return Err(Error::Shape(format!("{} observations for {} actions", obs.rows(), actions.rows())));
    }
    let batch = NoisedBatch::sample(actions, sched, rng)?;
    let mut g = Graph::new();
    let noisy = g.constant(batch.noisy.clone());
    let o = g.constant(obs.clone());
    let eps_hat = predictor.predict_eps(&mut g, noisy, o, &batch.net_timesteps(sched)?)?;
    let noise = g.constant(batch.noise.clone());
    let loss = ddpm_loss_node(&mut g, eps_hat, noise)?;
    Ok(g.scalar_value(loss))
}
