//! Run configuration: a TOML document with dotted-path overrides.
//!
//! Every key is optional; an empty document yields the defaults below.
//! Unknown keys are rejected and errors name the offending path.
//!
//! ```toml
//! seed = 42                # overridden by --seed, then DIFFPOLICY_SEED
//! deterministic = false    # single-threaded everywhere
//! output_dir = "runs"
//!
//! [env]
//! kind = "reach_easy"      # reach_easy | pointmass_bimodal | corridor_precision
//! horizon = 4
//! sparse_reward = false
//!
//! [demos]
//! trajectories = 100
//!
//! [network]
//! obs_embed = 64
//! time_embed = 32
//! time_proj = 32
//! trunk = [256, 256, 256]
//!
//! [diffusion]
//! steps = 100
//! beta_start = 1e-4
//! beta_end = 0.02
//! variance = "posterior"   # posterior | beta
//! eval_min_std = 0.0
//!
//! [dispersive]             # variant, lambda, tau, margin, include_diagonal, placement, grouping
//! [pretrain]               # iterations, batch_size, lr, eval_every, eval_episodes, log_every
//! [finetune]               # PPO settings, see FinetuneConfig
//! [probe]                  # batch_size, timestep
//!
//! [eval]
//! episodes = 100
//!
//! [inputs]
//! dataset = "demos.txt"
//! checkpoint = "pretrain/final.ckpt"
//! ```
//!
//! Overrides are `section.key=value`; the value is read as a TOML value and
//! falls back to a plain string, so `env.kind=corridor_precision` works
//! without quotes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::ProbeConfig;
use crate::diffusion::{make_schedule_with, NoiseSchedule, VarianceKind};
use crate::dispersive::DispersiveConfig;
use crate::envs::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::finetune::FinetuneConfig;
use crate::networks::DenoiserConfig;
use crate::pretrain::PretrainConfig;
use crate::rng::DEFAULT_SEED;

pub const SEED_ENV_VAR: &str = "DIFFPOLICY_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub horizon: usize,
    pub sparse_reward: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { kind: EnvKind::ReachEasy, horizon: 4, sparse_reward: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub trajectories: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { trajectories: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub obs_embed: usize,
    pub time_embed: usize,
    pub time_proj: usize,
    pub trunk: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { obs_embed: 64, time_embed: 32, time_proj: 32, trunk: vec![256; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variance: VarianceKind,
    /// Minimum sampling std when evaluating a pre-trained policy.
    pub eval_min_std: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 100, beta_start: 1e-4, beta_end: 0.02, variance: VarianceKind::Posterior, eval_min_std: 0.0 }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule_with(self.steps, self.beta_start, self.beta_end, self.variance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputsConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub demos: DemoConfig,
    pub network: NetworkConfig,
    pub diffusion: DiffusionConfig,
    pub dispersive: DispersiveConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
    pub inputs: InputsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            deterministic: false,
            output_dir: PathBuf::from("runs"),
            env: EnvConfig::default(),
            demos: DemoConfig::default(),
            network: NetworkConfig::default(),
            diffusion: DiffusionConfig::default(),
            dispersive: DispersiveConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
            inputs: InputsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn env_spec(&self) -> Result<EnvSpec> {
        let mut spec = EnvSpec::new(self.env.kind, self.env.horizon)?;
        spec.sparse_reward = self.env.sparse_reward;
        Ok(spec)
    }

    /// Denoiser topology for `spec`, with the hook placement resolved.
    pub fn denoiser_config(&self, spec: &EnvSpec) -> DenoiserConfig {
        DenoiserConfig {
            obs_dim: spec.obs_dim,
            action_dim: spec.action_dim,
            horizon: spec.horizon,
            obs_embed_dim: self.network.obs_embed,
            time_embed_dim: self.network.time_embed,
            time_proj_dim: self.network.time_proj,
            trunk: self.network.trunk.clone(),
            placement: self.dispersive.placement.resolve(spec.kind.default_placement()),
        }
    }

    pub fn execution(&self) -> Execution {
        if self.deterministic {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    /// Master seed: `cli`, then the environment variable, then the file,
    /// then the default.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        if let Some(s) = cli {
            return Ok(s);
        }
        if let Ok(v) = std::env::var(SEED_ENV_VAR) {
            return v.trim().parse().map_err(|_| Error::Config {
                path: SEED_ENV_VAR.into(),
                message: format!("expected an unsigned integer, got `{v}`"),
            });
        }
        Ok(self.seed.unwrap_or(DEFAULT_SEED))
    }

    pub fn validate(&self) -> Result<()> {
        self.env_spec()?;
        self.denoiser_config(&self.env_spec()?).validate()?;
        self.diffusion.schedule()?;
        self.dispersive.validate()?;
        self.finetune.validate()?;
        if self.finetune.k_finetune > self.diffusion.steps {
            return Err(Error::Config {
                path: "finetune.k_finetune".into(),
                message: format!("{} exceeds diffusion.steps = {}", self.finetune.k_finetune, self.diffusion.steps),
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { path: "<snapshot>".into(), message: e.to_string() })
    }
}

/// Splits `key=value` and converts the value to TOML.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw.split_once('=').ok_or_else(|| Error::Config {
        path: raw.into(),
        message: "override must have the form key=value".into(),
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config { path: key.into(), message: "empty path segment".into() });
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.split('.').map(String::from).collect(), parsed))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let mut table = root;
    for (i, seg) in path[..path.len() - 1].iter().enumerate() {
        let entry = table.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::Config {
            path: path[..=i].join("."),
            message: "not a section".into(),
        })?;
    }
    table.insert(path[path.len() - 1].clone(), value);
    Ok(())
}

/// Parses a TOML document and applies `overrides` in order.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| Error::Config { path: "<document>".into(), message: e.to_string() })?;
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        set_path(&mut table, &path, value)?;
    }
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        Error::Config { path, message: e.into_inner().to_string() }
    })
}

/// Reads `path` (or an empty document when `None`) and applies overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
