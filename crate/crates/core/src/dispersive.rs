//! Dispersive regularizers on hidden features: InfoNCE-style losses with
//! no positive pairs (squared-L2 and cosine dissimilarities) and a squared
//! hinge on pairwise distances.
//!
//! The `*_node` functions build the loss on a [`Graph`] so it can be
//! backpropagated into the denoiser; the plain functions evaluate the same
//! graph code on a constant batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::networks::HookPlacement;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispersiveVariant {
    InfonceL2,
    #[serde(rename = "infonce_cosine")]
    InfonceCos,
    Hinge,
}

impl DispersiveVariant {
    pub const ALL: [DispersiveVariant; 3] =
        [DispersiveVariant::InfonceL2, DispersiveVariant::InfonceCos, DispersiveVariant::Hinge];

    pub fn as_str(self) -> &'static str {
        match self {
            DispersiveVariant::InfonceL2 => "infonce_l2",
            DispersiveVariant::InfonceCos => "infonce_cosine",
            DispersiveVariant::Hinge => "hinge",
        }
    }
}

/// Hook layer choice; `auto` defers to the environment's default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementSetting {
    #[default]
    Auto,
    Early,
    Mid,
    Late,
}

impl PlacementSetting {
    pub fn resolve(self, auto: HookPlacement) -> HookPlacement {
        match self {
            PlacementSetting::Auto => auto,
            PlacementSetting::Early => HookPlacement::Early,
            PlacementSetting::Mid => HookPlacement::Mid,
            PlacementSetting::Late => HookPlacement::Late,
        }
    }
}

/// How batch rows are grouped before the loss is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One group per sampled denoising timestep.
    #[default]
    PerTimestep,
    /// The whole batch as a single group.
    WholeBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DispersiveConfig {
    pub variant: DispersiveVariant,
    pub lambda: f64,
    pub tau: f64,
    pub margin: f64,
    pub include_diagonal: bool,
    pub placement: PlacementSetting,
    pub grouping: Grouping,
}

impl Default for DispersiveConfig {
    fn default() -> Self {
        Self {
            variant: DispersiveVariant::InfonceL2,
            lambda: 0.5,
            tau: 0.5,
            margin: 1.0,
            include_diagonal: true,
            placement: PlacementSetting::Auto,
            grouping: Grouping::PerTimestep,
        }
    }
}

impl DispersiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidArgument(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Hidden features `[B, dim]` of one batch, optionally tagged with the
/// denoising timestep they were extracted at.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    features: Tensor,
    pub timestep: Option<usize>,
}

impl FeatureBatch {
    pub fn new(features: Tensor, timestep: Option<usize>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() == 0 || features.cols() == 0 {
            return Err(Error::Shape(format!("feature batch must be [B, dim] with B, dim >= 1, got {:?}", features.shape())));
        }
        if !features.all_finite() {
            return Err(Error::InvalidArgument("feature batch has non-finite entries".into()));
        }
        Ok(Self { features, timestep })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, None)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn batch_size(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

fn need_pairs(b: usize) -> Result<()> {
    if b < 2 {
        return Err(Error::InvalidArgument(format!("dispersive loss needs at least 2 rows, got {b}")));
    }
    Ok(())
}

fn off_diagonal_mask(b: usize) -> Vec<bool> {
    (0..b * b).map(|i| i / b != i % b).collect()
}

fn infonce_from_dist(g: &mut Graph, d: NodeId, tau: f64, include_diagonal: bool) -> Result<NodeId> {
    let b = g.value(d).rows();
    let s = g.scale(d, -1.0 / tau)?;
    let mask = (!include_diagonal).then(|| off_diagonal_mask(b));
    Ok(g.log_mean_exp(s, mask)?)
}

/// `log mean exp(-|h_i - h_j|^2 / tau)` over the selected pairs.
pub fn infonce_l2_node(g: &mut Graph, h: NodeId, tau: f64, include_diagonal: bool) -> Result<NodeId> {
    need_pairs(g.value(h).rows())?;
    let d = g.pairwise_sq_dist(h)?;
    infonce_from_dist(g, d, tau, include_diagonal)
}

/// Cosine dissimilarity matrix `1 - <h_i, h_j> / (|h_i| |h_j|)`.
pub fn cosine_dissimilarity_node(g: &mut Graph, h: NodeId) -> Result<NodeId> {
    let n = g.row_l2_norm(h)?;
    let hn = g.div_col(h, n)?;
    let ht = g.transpose(hn)?;
    let sim = g.matmul(hn, ht)?;
    let neg = g.scale(sim, -1.0)?;
    Ok(g.offset(neg, 1.0)?)
}

pub fn infonce_cos_node(g: &mut Graph, h: NodeId, tau: f64, include_diagonal: bool) -> Result<NodeId> {
    need_pairs(g.value(h).rows())?;
    let d = cosine_dissimilarity_node(g, h)?;
    infonce_from_dist(g, d, tau, include_diagonal)
}

/// Mean over ordered off-diagonal pairs of `max(0, margin - |h_i - h_j|^2)^2`.
pub fn hinge_node(g: &mut Graph, h: NodeId, margin: f64) -> Result<NodeId> {
    let b = g.value(h).rows();
    need_pairs(b)?;
    let d = g.pairwise_sq_dist(h)?;
    let neg = g.scale(d, -1.0)?;
    let gap = g.offset(neg, margin)?;
    let r = g.relu(gap)?;
    let sq = g.square(r)?;
    let mask = off_diagonal_mask(b).into_iter().map(|k| if k { 1.0 } else { 0.0 }).collect();
    let mask = g.constant(Tensor::matrix(b, b, mask)?);
    let masked = g.mul(sq, mask)?;
    let s = g.sum(masked)?;
    Ok(g.scale(s, 1.0 / (b * (b - 1)) as f64)?)
}

/// The configured variant on one group of rows.
pub fn dispersive_node(g: &mut Graph, h: NodeId, cfg: &DispersiveConfig) -> Result<NodeId> {
    match cfg.variant {
        DispersiveVariant::InfonceL2 => infonce_l2_node(g, h, cfg.tau, cfg.include_diagonal),
        DispersiveVariant::InfonceCos => infonce_cos_node(g, h, cfg.tau, cfg.include_diagonal),
        DispersiveVariant::Hinge => hinge_node(g, h, cfg.margin),
    }
}

/// Row indices grouped by timestep, in ascending timestep order.
pub fn group_by_timestep(timesteps: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in timesteps.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    groups.into_iter().collect()
}

/// Dispersive loss of `h` averaged over timestep groups. Groups with fewer
/// than two rows have no pairs and are skipped; `None` when no group has a
/// pair, in which case the caller uses 0.
pub fn disp_over_timesteps_node(
    g: &mut Graph,
    h: NodeId,
    timesteps: &[usize],
    cfg: &DispersiveConfig,
) -> Result<Option<NodeId>> {
    let b = g.value(h).rows();
    if timesteps.len() != b {
        return Err(Error::Shape(format!("{} timesteps for {b} feature rows", timesteps.len())));
    }
    let groups = match cfg.grouping {
        Grouping::PerTimestep => group_by_timestep(timesteps),
        Grouping::WholeBatch => vec![(0, (0..b).collect())],
    };
    let mut losses = Vec::new();
    for (_, rows) in groups.into_iter().filter(|(_, r)| r.len() >= 2) {
        let sel = if rows.len() == b { h } else { g.select_rows(h, &rows)? };
        losses.push(dispersive_node(g, sel, cfg)?);
    }
    if losses.is_empty() {
        return Ok(None);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(Some(g.scale(total, 1.0 / losses.len() as f64)?))
}

/// Unweighted mean of per-timestep losses.
pub fn disp_over_timesteps(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("no timestep groups".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `l_diff + lambda * l_disp`.
pub fn combined_pretrain_loss(l_diff: f64, l_disp: f64, lambda: f64) -> f64 {
    l_diff + lambda * l_disp
}

fn eval_on(h: &FeatureBatch, build: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(h.features().clone());
    let out = build(&mut g, x)?;
    Ok(g.scalar_value(out))
}

pub fn disp_infonce_l2(h: &FeatureBatch, tau: f64, include_diagonal: bool) -> Result<f64> {
    eval_on(h, |g, x| infonce_l2_node(g, x, tau, include_diagonal))
}

pub fn disp_infonce_cos(h: &FeatureBatch, tau: f64, include_diagonal: bool) -> Result<f64> {
    eval_on(h, |g, x| infonce_cos_node(g, x, tau, include_diagonal))
}

pub fn disp_hinge(h: &FeatureBatch, margin: f64) -> Result<f64> {
    eval_on(h, |g, x| hinge_node(g, x, margin))
}

pub fn disp_loss(h: &FeatureBatch, cfg: &DispersiveConfig) -> Result<f64> {
    eval_on(h, |g, x| dispersive_node(g, x, cfg))
}

/// `D[i][j] = |h_i - h_j|^2`.
pub fn pairwise_sq_l2(h: &FeatureBatch) -> Vec<Vec<f64>> {
    let b = h.batch_size();
    let mut g = Graph::new();
    let x = g.constant(h.features().clone());
    let d = g.pairwise_sq_dist(x).expect("feature batch is a matrix");
    g.value(d).data().chunks(b).map(<[f64]>::to_vec).collect()
}

/// Softmax weights `w_ij` over all `j` of `-|h_i - h_j|^2 / tau`.
pub fn attention_weights(h: &FeatureBatch, tau: f64) -> Vec<Vec<f64>> {
    pairwise_sq_l2(h)
        .into_iter()
        .map(|row| {
            let logits: Vec<f64> = row.iter().map(|d| -d / tau).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Closed-form gradient of the per-anchor term
/// `log sum_j exp(-|h_i - h_j|^2 / tau)` with respect to `h_i`, the other
/// rows held fixed: `-(2 / tau) sum_j w_ij (h_i - h_j)`. Descending it
/// pushes `h_i` away from its nearest neighbours.
pub fn disp_grad_reference(h: &FeatureBatch, tau: f64) -> Result<Vec<Vec<f64>>> {
    need_pairs(h.batch_size())?;
    let w = attention_weights(h, tau);
    let x = h.features();
    let d = h.dim();
    Ok((0..h.batch_size())
        .map(|i| {
            let mut grad = vec![0.0; d];
            for (j, wij) in w[i].iter().enumerate() {
                for t in 0..d {
                    grad[t] += wij * (x.row(i)[t] - x.row(j)[t]);
                }
            }
            grad.iter().map(|v| -2.0 / tau * v).collect()
        })
        .collect())
}
