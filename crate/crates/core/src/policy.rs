//! A trained denoiser wrapped as an environment controller.

use crate::diffusion::{sample_chain, DenoisingChain, NoiseSchedule};
use crate::envs::{Controller, EnvSpec, EnvState, ObsNormalizer};
use crate::error::{Error, Result};
use crate::networks::DenoiserParams;
use crate::rng::Rng;

/// Samples one denoising chain per environment step from normalized
/// observations.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionPolicy<'a> {
    pub denoiser: &'a DenoiserParams,
    pub normalizer: &'a ObsNormalizer,
    pub sched: &'a NoiseSchedule,
    pub min_std: f64,
}

impl DiffusionPolicy<'_> {
    pub fn chain(&self, obs: &[f64], rng: &mut Rng) -> Result<DenoisingChain> {
        if obs.len() != self.denoiser.config.obs_dim {
            return Err(Error::Shape(format!(
                "policy expects {} observation entries, got {}",
                self.denoiser.config.obs_dim,
                obs.len()
            )));
        }
        sample_chain(self.denoiser, &self.normalizer.apply(obs), self.sched, self.min_std, rng)
    }
}

impl Controller for DiffusionPolicy<'_> {
    fn act(&self, spec: &EnvSpec, _state: &EnvState, obs: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let chain = self.chain(obs, rng)?;
        if chain.action().len() != spec.chunk_dim() {
            return Err(Error::Shape(format!("policy emits {} actions, env expects {}", chain.action().len(), spec.chunk_dim())));
        }
        Ok(chain.action().to_vec())
    }
}
