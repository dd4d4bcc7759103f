//! The noise-prediction network and the value network.
//!
//! The denoiser conditions on the observation and the denoising timestep by
//! concatenating an observation embedding and a projected sinusoidal time
//! embedding with the noisy action chunk. The trunk is a stack of residual
//! ReLU layers `h <- h + relu(W h + b)`; the activations after each trunk
//! layer are exposed so the dispersive loss can hook any of them.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_kernel, Gradients, Graph, NodeId, Result as AdResult, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Registers every tensor on `g`, as parameters or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.tensors()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Gradients for ids returned by [`ParamSet::bind`], in set order.
    pub fn collect_grads(ids: &[NodeId], grads: &Gradients) -> Vec<Vec<f64>> {
        ids.iter().map(|id| grads.wrt(*id).data().to_vec()).collect()
    }

    /// Replaces every tensor with the same-named tensor of `other`, checking
    /// names and shapes. The error names the first mismatching tensor.
    pub fn assign_from(&mut self, other: &ParamSet) -> Result<()> {
        if let Some(msg) = self.first_mismatch(other) {
            return Err(Error::Checkpoint(msg));
        }
        for ((_, dst), (_, src)) in self.entries.iter_mut().zip(&other.entries) {
            *dst = src.clone();
        }
        Ok(())
    }

    fn first_mismatch(&self, other: &ParamSet) -> Option<String> {
        for (i, (name, t)) in self.entries.iter().enumerate() {
            match other.entries.get(i) {
                Some((n, o)) if n == name && o.shape() == t.shape() => {}
                Some((n, o)) => {
                    return Some(format!(
                        "tensor mismatch at `{name}` {:?}: found `{n}` {:?}",
                        t.shape(),
                        o.shape()
                    ))
                }
                None => return Some(format!("tensor `{name}` missing")),
            }
        }
        if other.entries.len() > self.entries.len() {
            return Some(format!("unexpected tensor `{}`", other.entries[self.entries.len()].0));
        }
        None
    }
}

/// Trunk layer whose activations feed the dispersive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookPlacement {
    Early,
    Mid,
    Late,
}

impl HookPlacement {
    pub const ALL: [HookPlacement; 3] = [HookPlacement::Early, HookPlacement::Mid, HookPlacement::Late];

    /// Trunk-layer index for a trunk of `layers` layers.
    pub fn layer_index(self, layers: usize) -> usize {
        match self {
            HookPlacement::Early => 0,
            HookPlacement::Mid => layers / 2,
            HookPlacement::Late => layers.saturating_sub(1),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HookPlacement::Early => "early",
            HookPlacement::Mid => "mid",
            HookPlacement::Late => "late",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub obs_embed_dim: usize,
    pub time_embed_dim: usize,
    pub time_proj_dim: usize,
    pub trunk: Vec<usize>,
    pub placement: HookPlacement,
}

impl DenoiserConfig {
    pub fn chunk_dim(&self) -> usize {
        self.action_dim * self.horizon
    }

    pub fn hook_index(&self) -> usize {
        self.placement.layer_index(self.trunk.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.len() < 3 {
            return Err(Error::InvalidArgument(format!("trunk needs at least 3 layers, got {}", self.trunk.len())));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("time embedding dim {} is odd", self.time_embed_dim)));
        }
        let widths = [self.obs_dim, self.action_dim, self.horizon, self.obs_embed_dim, self.time_embed_dim, self.time_proj_dim];
        if widths.iter().chain(&self.trunk).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of timestep `k`.
pub fn time_embed(k: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("time embedding dim {dim} is odd")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let arg = k as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!("zero-width layer {fan_in}x{fan_out}")));
    }
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
    Ok(Tensor::matrix(fan_in, fan_out, data)?)
}

fn push_linear(p: &mut ParamSet, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    p.push(format!("{name}.w"), glorot(rng, fan_in, fan_out)?);
    p.push(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    Ok(())
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> AdResult<NodeId> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

const OBS0: usize = 0;
const OBS1: usize = 2;
const TIME: usize = 4;
const INPUT: usize = 6;
const TRUNK: usize = 8;

impl DenoiserParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut p = ParamSet::default();
        push_linear(&mut p, rng, "obs.0", c.obs_dim, c.obs_embed_dim)?;
        push_linear(&mut p, rng, "obs.1", c.obs_embed_dim, c.obs_embed_dim)?;
        push_linear(&mut p, rng, "time", c.time_embed_dim, c.time_proj_dim)?;
        push_linear(&mut p, rng, "input", c.chunk_dim() + c.obs_embed_dim + c.time_proj_dim, c.trunk[0])?;
        let mut prev = c.trunk[0];
        for (i, &w) in c.trunk.iter().enumerate() {
            push_linear(&mut p, rng, &format!("trunk.{i}"), prev, w)?;
            prev = w;
        }
        push_linear(&mut p, rng, "head", prev, c.chunk_dim())?;
        Ok(Self { config, params: p })
    }

    /// All-zero parameters of the given topology.
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Init);
        let mut d = Self::init(config, &mut rng)?;
        d.params.tensors_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        Ok(d)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDenoiser {
        BoundDenoiser { config: self.config.clone(), ids: self.params.bind(g, trainable) }
    }

    /// Forward pass on a batch; returns `(eps_hat, features at the hook)`.
    pub fn forward(&self, noisy: &Tensor, obs: &Tensor, timesteps: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let noisy = g.constant(noisy.clone());
        let obs = g.constant(obs.clone());
        let out = bound.forward(&mut g, noisy, obs, timesteps)?;
        Ok((g.value(out.eps).clone(), g.value(out.hook()).clone()))
    }
}

impl DenoiserParams {
    /// Graph-free inference pass. Performs the same floating-point operations
    /// in the same order as [`BoundDenoiser::forward`], so results are
    /// bit-identical. Returns `(eps_hat, trunk activations)`.
    pub fn predict(&self, noisy: &Tensor, obs: &Tensor, timesteps: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let c = &self.config;
        let rows = noisy.rows();
        if noisy.cols() != c.chunk_dim() || obs.cols() != c.obs_dim || obs.rows() != rows || timesteps.len() != rows {
            return Err(Error::Shape(format!(
                "denoiser expects [{rows}, {}] chunk, [{rows}, {}] obs and {rows} timesteps",
                c.chunk_dim(),
                c.obs_dim
            )));
        }
        let p: Vec<&Tensor> = self.params.tensors().collect();
        let o = plain_linear(obs, p[OBS0], p[OBS0 + 1]);
        let o = plain_relu(o);
        let o = plain_linear(&o, p[OBS1], p[OBS1 + 1]);
        let mut temb = Vec::with_capacity(rows * c.time_embed_dim);
        for &k in timesteps {
            temb.extend(time_embed(k, c.time_embed_dim)?);
        }
        let temb = Tensor::matrix(rows, c.time_embed_dim, temb)?;
        let t = plain_relu(plain_linear(&temb, p[TIME], p[TIME + 1]));
        let x = plain_concat(&[noisy, &o, &t]);
        let mut h = plain_relu(plain_linear(&x, p[INPUT], p[INPUT + 1]));
        let mut trunk = Vec::with_capacity(c.trunk.len());
        for i in 0..c.trunk.len() {
            let z = plain_relu(plain_linear(&h, p[TRUNK + 2 * i], p[TRUNK + 2 * i + 1]));
            h = if z.cols() == h.cols() {
                let data = h.data().iter().zip(z.data()).map(|(a, b)| a + b).collect();
                Tensor::matrix(rows, z.cols(), data)?
            } else {
                z
            };
            trunk.push(h.clone());
        }
        let head = TRUNK + 2 * c.trunk.len();
        let eps = plain_linear(&h, p[head], p[head + 1]);
        if !eps.all_finite() {
            return Err(Error::InvalidArgument("denoiser produced non-finite output".into()));
        }
        Ok((eps, trunk))
    }
}

fn plain_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = x.dims2().unwrap();
    let n = w.cols();
    let mut data = matmul_kernel(x.data(), w.data(), m, k, n);
    let bias = b.data();
    for (i, v) in data.iter_mut().enumerate() {
        *v += bias[i % n];
    }
    Tensor::matrix(m, n, data).unwrap()
}

fn plain_relu(mut x: Tensor) -> Tensor {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn plain_concat(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::matrix(rows, total, data).unwrap()
}

/// Output of one denoiser pass.
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    pub eps: NodeId,
    /// Activations after each trunk layer.
    pub trunk: Vec<NodeId>,
    pub hook_index: usize,
}

impl DenoiserOutput {
    pub fn hook(&self) -> NodeId {
        self.trunk[self.hook_index]
    }

    pub fn at(&self, placement: HookPlacement) -> NodeId {
        self.trunk[placement.layer_index(self.trunk.len())]
    }
}

/// Denoiser parameters registered on a particular graph.
#[derive(Clone, Debug)]
pub struct BoundDenoiser {
    pub config: DenoiserConfig,
    pub ids: Vec<NodeId>,
}

impl BoundDenoiser {
    pub fn forward(&self, g: &mut Graph, noisy: NodeId, obs: NodeId, timesteps: &[usize]) -> Result<DenoiserOutput> {
        self.forward_until(g, noisy, obs, timesteps, None)
    }

    /// Forward pass that stops after trunk layer `stop` (inclusive) when
    /// given; `eps` then refers to the last computed trunk activation.
    pub fn forward_until(
        &self,
        g: &mut Graph,
        noisy: NodeId,
        obs: NodeId,
        timesteps: &[usize],
        stop: Option<usize>,
    ) -> Result<DenoiserOutput> {
        let c = &self.config;
        let rows = g.value(noisy).rows();
        if g.value(noisy).cols() != c.chunk_dim() || g.value(obs).cols() != c.obs_dim {
            return Err(Error::Shape(format!(
                "denoiser expects chunk {} and obs {}, got {} and {}",
                c.chunk_dim(),
                c.obs_dim,
                g.value(noisy).cols(),
                g.value(obs).cols()
            )));
        }
        if g.value(obs).rows() != rows || timesteps.len() != rows {
            return Err(Error::Shape(format!(
                "batch rows disagree: chunk {rows}, obs {}, timesteps {}",
                g.value(obs).rows(),
                timesteps.len()
            )));
        }
        let p = &self.ids;
        let o = linear(g, obs, p[OBS0], p[OBS0 + 1])?;
        let o = g.relu(o)?;
        let o = linear(g, o, p[OBS1], p[OBS1 + 1])?;

        let mut temb = Vec::with_capacity(rows * c.time_embed_dim);
        for &k in timesteps {
            temb.extend(time_embed(k, c.time_embed_dim)?);
        }
        let temb = g.constant(Tensor::matrix(rows, c.time_embed_dim, temb)?);
        let t = linear(g, temb, p[TIME], p[TIME + 1])?;
        let t = g.relu(t)?;

        let x = g.concat(&[noisy, o, t])?;
        let h0 = linear(g, x, p[INPUT], p[INPUT + 1])?;
        let mut h = g.relu(h0)?;
        let mut trunk = Vec::with_capacity(c.trunk.len());
        for i in 0..c.trunk.len() {
            let z = linear(g, h, p[TRUNK + 2 * i], p[TRUNK + 2 * i + 1])?;
            let z = g.relu(z)?;
            h = if g.value(z).cols() == g.value(h).cols() { g.add(h, z)? } else { z };
            trunk.push(h);
            if stop == Some(i) {
                return Ok(DenoiserOutput { eps: h, trunk, hook_index: i });
            }
        }
        let head = TRUNK + 2 * c.trunk.len();
        let eps = linear(g, h, p[head], p[head + 1])?;
        Ok(DenoiserOutput { eps, trunk, hook_index: c.hook_index() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueConfig {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueParams {
    pub config: ValueConfig,
    pub params: ParamSet,
}

impl ValueParams {
    pub fn init(config: ValueConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = ParamSet::default();
        let mut prev = config.obs_dim;
        for (i, &w) in config.hidden.iter().enumerate() {
            push_linear(&mut p, rng, &format!("value.{i}"), prev, w)?;
            prev = w;
        }
        push_linear(&mut p, rng, "value.out", prev, 1)?;
        Ok(Self { config, params: p })
    }

    /// `[B, obs_dim] -> [B, 1]`.
    pub fn forward_graph(&self, g: &mut Graph, ids: &[NodeId], obs: NodeId) -> Result<NodeId> {
        if g.value(obs).cols() != self.config.obs_dim {
            return Err(Error::Shape(format!(
                "value net expects obs {}, got {}",
                self.config.obs_dim,
                g.value(obs).cols()
            )));
        }
        let mut h = obs;
        let layers = ids.len() / 2;
        for l in 0..layers {
            h = linear(g, h, ids[2 * l], ids[2 * l + 1])?;
            if l + 1 < layers {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// One value per observation row, order preserved.
    pub fn forward(&self, obs: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let ids = self.params.bind(&mut g, false);
        let o = g.constant(obs.clone());
        let v = self.forward_graph(&mut g, &ids, o)?;
        Ok(g.value(v).data().to_vec())
    }
}
