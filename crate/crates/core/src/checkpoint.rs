//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DPCKPT\0\0"
//! version      u32
//! header_len   u64
//! header       header_len bytes of JSON
//! payload      f64 values, little-endian
//! ```
//!
//! The JSON header carries the environment, observation normalizer,
//! diffusion settings, network topology, iteration, master seed, optimizer
//! settings, and a manifest of `{name, shape, offset, len}` records whose
//! offsets (in f64 units) tile the payload exactly. Tensor names are
//! prefixed by group: `denoiser/`, `value/`, and `<optimizer>.m/`,
//! `<optimizer>.v/` for Adam moments. Random streams are derived from the
//! master seed and iteration, so those two values are the whole RNG state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::DiffusionConfig;
use crate::diffusion::{subsample_schedule, NoiseSchedule};
use crate::envs::{EnvSpec, ObsNormalizer};
use crate::error::{Error, Result};
use crate::finetune::FinetuneState;
use crate::networks::{DenoiserConfig, DenoiserParams, ParamSet, ValueConfig, ValueParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::{PretrainState, StepMetrics};

pub const MAGIC: &[u8; 8] = b"DPCKPT\0\0";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub enum TrainingState {
    Pretrain(PretrainState),
    Finetune(FinetuneState),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub env: EnvSpec,
    pub normalizer: ObsNormalizer,
    pub diffusion: DiffusionConfig,
    /// Number of fine-tuning denoising steps, for fine-tuned policies.
    pub finetune_steps: Option<usize>,
    pub eval_success: Option<f64>,
    pub state: TrainingState,
}

impl Checkpoint {
    pub fn denoiser(&self) -> &DenoiserParams {
        match &self.state {
            TrainingState::Pretrain(s) => &s.denoiser,
            TrainingState::Finetune(s) => &s.denoiser,
        }
    }

    pub fn iteration(&self) -> u64 {
        match &self.state {
            TrainingState::Pretrain(s) => s.iteration,
            TrainingState::Finetune(s) => s.iteration,
        }
    }

    /// Schedule the policy samples with: the full schedule, or its
    /// fine-tuning subsample.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let base = self.diffusion.schedule()?;
        match self.finetune_steps {
            Some(k) => subsample_schedule(&base, k),
            None => Ok(base),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    name: String,
    config: AdamWConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: Stage,
    env: EnvSpec,
    normalizer: ObsNormalizer,
    diffusion: DiffusionConfig,
    finetune_steps: Option<usize>,
    eval_success: Option<f64>,
    denoiser: DenoiserConfig,
    value: Option<ValueConfig>,
    iteration: u64,
    seed: u64,
    /// `[l_diff, l_disp, l_total]` of the last pre-training update.
    last_losses: Option<[f64; 3]>,
    optimizers: Vec<OptimizerMeta>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Default)]
struct PayloadWriter {
    manifest: Vec<ManifestEntry>,
    data: Vec<f64>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, t: &Tensor) {
        self.manifest.push(ManifestEntry { name, shape: t.shape().to_vec(), offset: self.data.len(), len: t.len() });
        self.data.extend_from_slice(t.data());
    }

    fn params(&mut self, group: &str, p: &ParamSet) {
        for (name, t) in p.entries() {
            self.push(format!("{group}/{name}"), t);
        }
    }

    fn optimizer(&mut self, name: &str, opt: &AdamW, params: &ParamSet) -> OptimizerMeta {
        for (moment, values) in [("m", &opt.m), ("v", &opt.v)] {
            for ((pname, t), v) in params.entries().iter().zip(values) {
                let shaped = Tensor::new(t.shape().to_vec(), v.clone()).expect("moment matches parameter shape");
                self.push(format!("{name}.{moment}/{pname}"), &shaped);
            }
        }
        OptimizerMeta { name: name.into(), config: opt.config, step: opt.step }
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::default();
    let (stage, value, iteration, seed, last_losses, optimizers) = match &ck.state {
        TrainingState::Pretrain(s) => {
            w.params("denoiser", &s.denoiser.params);
            let opt = w.optimizer("opt", &s.opt, &s.denoiser.params);
            let last = s.last.map(|m| [m.l_diff, m.l_disp, m.l_total]);
            (Stage::Pretrain, None, s.iteration, s.seed, last, vec![opt])
        }
        TrainingState::Finetune(s) => {
            w.params("denoiser", &s.denoiser.params);
            w.params("value", &s.value.params);
            let actor = w.optimizer("actor_opt", &s.actor_opt, &s.denoiser.params);
            let critic = w.optimizer("critic_opt", &s.critic_opt, &s.value.params);
            (Stage::Finetune, Some(s.value.config.clone()), s.iteration, s.seed, None, vec![actor, critic])
        }
    };
    let header = Header {
        stage,
        env: ck.env.clone(),
        normalizer: ck.normalizer.clone(),
        diffusion: ck.diffusion.clone(),
        finetune_steps: ck.finetune_steps,
        eval_success: ck.eval_success,
        denoiser: ck.denoiser().config.clone(),
        value,
        iteration,
        seed,
        last_losses,
        optimizers,
        manifest: w.manifest,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 8 * w.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &w.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Payload {
    manifest: Vec<ManifestEntry>,
    data: Vec<f64>,
}

impl Payload {
    /// Tensors named `group/...`, in file order, with the prefix removed.
    fn group(&self, group: &str) -> Result<ParamSet> {
        let prefix = format!("{group}/");
        let mut p = ParamSet::default();
        for e in &self.manifest {
            if let Some(name) = e.name.strip_prefix(&prefix) {
                let t = Tensor::new(e.shape.clone(), self.data[e.offset..e.offset + e.len].to_vec())
                    .map_err(|err| Error::Checkpoint(format!("tensor `{}`: {err}", e.name)))?;
                p.push(name, t);
            }
        }
        Ok(p)
    }

    fn optimizer(&self, meta: &[OptimizerMeta], name: &str, params: &ParamSet) -> Result<AdamW> {
        let m = meta
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer `{name}` missing")))?;
        let mut opt = AdamW::new(m.config, params);
        opt.step = m.step;
        for (moment, dst) in [("m", &mut opt.m), ("v", &mut opt.v)] {
            let mut shaped = params.clone();
            shaped.assign_from(&self.group(&format!("{name}.{moment}"))?)?;
            *dst = shaped.tensors().map(|t| t.data().to_vec()).collect();
        }
        Ok(opt)
    }
}

fn check_manifest(manifest: &[ManifestEntry], payload_len: usize) -> Result<()> {
    let mut next = 0;
    for e in manifest {
        if e.offset != next || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Checkpoint(format!("corrupt manifest at `{}`", e.name)));
        }
        next += e.len;
    }
    if next != payload_len {
        return Err(Error::Checkpoint(format!("manifest covers {next} values, payload holds {payload_len}")));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let rest = &bytes[PREAMBLE..];
    let header_len = usize::try_from(header_len)
        .ok()
        .filter(|&n| n <= rest.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    let raw = &rest[header_len..];
    if raw.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("truncated payload ({} trailing bytes)", raw.len() % 8)));
    }
    let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    check_manifest(&header.manifest, data.len())?;
    let payload = Payload { manifest: header.manifest, data };

    let mut denoiser = DenoiserParams::zeros(header.denoiser)?;
    denoiser.params.assign_from(&payload.group("denoiser")?)?;
    let state = match header.stage {
        Stage::Pretrain => {
            let opt = payload.optimizer(&header.optimizers, "opt", &denoiser.params)?;
            let last = header.last_losses.map(|[l_diff, l_disp, l_total]| StepMetrics { l_diff, l_disp, l_total });
            TrainingState::Pretrain(PretrainState { denoiser, opt, iteration: header.iteration, seed: header.seed, last })
        }
        Stage::Finetune => {
            let vcfg = header.value.ok_or_else(|| Error::Checkpoint("fine-tuning checkpoint without value net".into()))?;
            let mut value = ValueParams::init(vcfg, &mut crate::rng::stream(0, crate::rng::Stream::Init))?;
            value.params.assign_from(&payload.group("value")?)?;
            let actor_opt = payload.optimizer(&header.optimizers, "actor_opt", &denoiser.params)?;
            let critic_opt = payload.optimizer(&header.optimizers, "critic_opt", &value.params)?;
            TrainingState::Finetune(FinetuneState {
                denoiser,
                value,
                actor_opt,
                critic_opt,
                iteration: header.iteration,
                seed: header.seed,
            })
        }
    };
    Ok(Checkpoint {
        env: header.env,
        normalizer: header.normalizer,
        diffusion: header.diffusion,
        finetune_steps: header.finetune_steps,
        eval_success: header.eval_success,
        state,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Copies the stored denoiser into `target`, which fixes the expected
/// topology; a mismatch names the first differing tensor.
pub fn load_denoiser_into(path: &Path, target: &mut DenoiserParams) -> Result<()> {
    let ck = load_checkpoint(path)?;
    target.params.assign_from(&ck.denoiser().params)
}
