//! Spread statistics of hidden features, used to detect representation
//! collapse at a hook layer.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::diffusion::{forward_noise, standard_normal, NoiseSchedule};
use crate::dispersive::{disp_hinge, disp_infonce_cos, disp_infonce_l2, DispersiveConfig, FeatureBatch};
use crate::envs::DemoDataset;
use crate::error::{Error, Result};
use crate::networks::{DenoiserParams, HookPlacement};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub placement: Option<HookPlacement>,
    /// Schedule index the probe batch was noised to.
    pub timestep: Option<usize>,
    pub batch_size: usize,
    pub dim: usize,
    /// Mean Euclidean distance over unordered pairs.
    pub mean_pairwise: f64,
    pub min_nn: f64,
    pub median_nn: f64,
    /// `tr(C)^2 / tr(C^2)` of the feature covariance; 1 for a point cloud
    /// with no spread.
    pub participation_ratio: f64,
    pub infonce_l2: f64,
    pub infonce_cosine: f64,
    pub hinge: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Participation ratio through the centered Gram matrix `G`:
/// `tr(C) = tr(G)/B` and `tr(C^2) = |G|_F^2 / B^2`.
fn participation_ratio(h: &Tensor) -> f64 {
    let (b, d) = (h.rows(), h.cols());
    let mean: Vec<f64> = (0..d).map(|j| (0..b).map(|i| h.row(i)[j]).sum::<f64>() / b as f64).collect();
    let centered: Vec<Vec<f64>> = (0..b).map(|i| h.row(i).iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut trace = 0.0;
    let mut frob = 0.0;
    for i in 0..b {
        for j in 0..b {
            let gij: f64 = centered[i].iter().zip(&centered[j]).map(|(x, y)| x * y).sum();
            if i == j {
                trace += gij;
            }
            frob += gij * gij;
        }
    }
    if trace <= 0.0 || frob <= 0.0 {
        return 1.0;
    }
    (trace * trace / frob).clamp(1.0, d as f64)
}

/// Statistics of one feature batch; loss columns use `cfg`'s temperature,
/// margin and diagonal convention.
pub fn dispersion_stats(h: &FeatureBatch, cfg: &DispersiveConfig) -> Result<DispersionReport> {
    let b = h.batch_size();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("dispersion statistics need at least 2 rows, got {b}")));
    }
    let f = h.features();
    let mut nn = vec![f64::INFINITY; b];
    let mut total = 0.0;
    for i in 0..b {
        for j in i + 1..b {
            let d = dist(f.row(i), f.row(j));
            total += d;
            nn[i] = nn[i].min(d);
            nn[j] = nn[j].min(d);
        }
    }
    let min_nn = nn.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(DispersionReport {
        placement: None,
        timestep: h.timestep,
        batch_size: b,
        dim: h.dim(),
        mean_pairwise: total / (b * (b - 1) / 2) as f64,
        min_nn,
        median_nn: median(&mut nn),
        participation_ratio: participation_ratio(f),
        infonce_l2: disp_infonce_l2(h, cfg.tau, cfg.include_diagonal)?,
        infonce_cosine: disp_infonce_cos(h, cfg.tau, cfg.include_diagonal)?,
        hinge: disp_hinge(h, cfg.margin)?,
    })
}

/// Fixed probe batch for [`collapse_report`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub batch_size: usize,
    /// Schedule index of the probe; `None` uses `K / 2` (at least 1).
    pub timestep: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { batch_size: 64, timestep: None }
    }
}

/// Hook-layer features of a seeded probe batch, noised to one timestep,
/// at each requested placement.
pub fn collapse_report(
    denoiser: &DenoiserParams,
    dataset: &DemoDataset,
    placements: &[HookPlacement],
    sched: &NoiseSchedule,
    probe: &ProbeConfig,
    disp: &DispersiveConfig,
    seed: u64,
) -> Result<Vec<DispersionReport>> {
    let (obs, actions) = dataset.pairs();
    if obs.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let k = probe.timestep.unwrap_or((sched.steps() / 2).max(1));
    let mut rng = stream(seed, Stream::Probe);
    let n = probe.batch_size.min(obs.len());
    let idx = index::sample(&mut rng, obs.len(), n).into_vec();
    let mut noisy = Vec::with_capacity(n);
    for &i in &idx {
        let eps = standard_normal(&mut rng, actions[i].len());
        noisy.push(forward_noise(&actions[i], k, &eps, sched)?);
    }
    let o: Vec<&Vec<f64>> = idx.iter().map(|&i| &obs[i]).collect();
    let net_k = sched.net_timestep(k)?;
    let (_, trunk) = denoiser.predict(&Tensor::from_rows(&noisy)?, &Tensor::from_rows(&o)?, &vec![net_k; n])?;
    placements
        .iter()
        .map(|&p| {
            let h = trunk[p.layer_index(trunk.len())].clone();
            let mut r = dispersion_stats(&FeatureBatch::new(h, Some(k))?, disp)?;
            r.placement = Some(p);
            Ok(r)
        })
        .collect()
}

/// `key=value` lines, one record per report, records separated by a blank
/// line. Floats round-trip exactly.
pub fn reports_to_text(reports: &[DispersionReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let placement = r.placement.map_or("none", HookPlacement::as_str);
        let _ = writeln!(out, "placement={placement}");
        match r.timestep {
            Some(k) => {
                let _ = writeln!(out, "timestep={k}");
            }
            None => out.push_str("timestep=none\n"),
        }
        let _ = writeln!(out, "batch_size={}", r.batch_size);
        let _ = writeln!(out, "dim={}", r.dim);
        for (key, v) in [
            ("mean_pairwise", r.mean_pairwise),
            ("min_nn", r.min_nn),
            ("median_nn", r.median_nn),
            ("participation_ratio", r.participation_ratio),
            ("infonce_l2", r.infonce_l2),
            ("infonce_cosine", r.infonce_cosine),
            ("hinge", r.hinge),
        ] {
            let _ = writeln!(out, "{key}={v:?}");
        }
        out.push('\n');
    }
    out
}

/// Appends reports to `path`, creating it if needed.
pub fn append_reports(path: &Path, reports: &[DispersionReport]) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(reports_to_text(reports).as_bytes()).map_err(|e| Error::io(path, e))
}
