//! Acceptance criteria 1-10.
//!
//! Runs without the libtest harness so that each criterion prints exactly
//! one `PASS`/`FAIL` line. Set `ACCEPTANCE_CRITERIA=3,7` to run a subset.
//! The process exits nonzero if any selected criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use diffpolicy::autodiff::{finite_diff_report, Graph, NodeId, Tensor};
use diffpolicy::diagnostics::{collapse_report, ProbeConfig};
use diffpolicy::diffusion::{
    ddpm_loss_node, forward_noise, gaussian_logprob, make_schedule, reverse_mean, sample_chain, subsample_schedule,
    NoiseSchedule,
};
use diffpolicy::dispersive::{
    disp_grad_reference, disp_hinge, disp_infonce_cos, disp_infonce_l2, hinge_node, infonce_cos_node, infonce_l2_node,
    DispersiveConfig, FeatureBatch,
};
use diffpolicy::envs::{gen_demos, EnvKind, EnvSpec, ObsNormalizer};
use diffpolicy::exec::Execution;
use diffpolicy::finetune::{
    chain_logprob, clipped_objective, clipped_objective_node, collect_rollouts, compute_gae, gae, minibatch_loss,
    run_finetune, sample_denoise_steps, FinetuneConfig, FinetuneSetup, FinetuneState, LossSettings, RolloutBuffer,
    RolloutSetup, StepWeighting,
};
use diffpolicy::networks::{BoundDenoiser, DenoiserConfig, DenoiserParams, HookPlacement, ParamSet, ValueConfig, ValueParams};
use diffpolicy::pretrain::{run_pretrain, PretrainConfig, PretrainSetup, PretrainState};
use diffpolicy::rng::{instance, stream, Rng, Stream};
use rand::Rng as _;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient soundness", criterion_1),
        ("dispersive oracles", criterion_2),
        ("diffusion algebra", criterion_3),
        ("GAE oracle", criterion_4),
        ("importance-sampling unbiasedness", criterion_5),
        ("PPO mechanics", criterion_6),
        ("reach_easy pre-training", criterion_7),
        ("dispersion effect", criterion_8),
        ("corridor fine-tuning", criterion_9),
        ("determinism", criterion_10),
    ];
    let selected: Option<Vec<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:2} {name}: PASS ({detail}; {secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:2} {name}: FAIL ({detail}; {secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn normal_tensor(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn tiny_denoiser(obs_dim: usize, horizon: usize, placement: HookPlacement, seed: u64) -> DenoiserParams {
    let cfg = DenoiserConfig {
        obs_dim,
        action_dim: 2,
        horizon,
        obs_embed_dim: 3,
        time_embed_dim: 4,
        time_proj_dim: 3,
        trunk: vec![4, 4, 4],
        placement,
    };
    DenoiserParams::init(cfg, &mut stream(seed, Stream::Init)).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Gradient soundness
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;
/// Instances whose ReLU/clamp inputs lie this close to a kink are redrawn.
const KINK_MARGIN: f64 = 1e-4;

/// Runs `check` on 100 instances that are not at a kink; returns the worst
/// relative error and the number of redraws.
fn fd_instances(mut check: impl FnMut(u64) -> Option<f64>) -> (f64, usize) {
    let (mut worst, mut redraws, mut done, mut seed) = (0.0f64, 0, 0, 0u64);
    while done < 100 {
        seed += 1;
        match check(seed) {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => redraws += 1,
        }
    }
    (worst, redraws)
}

fn net_points(d: &DenoiserParams, rng: &mut Rng, b: usize) -> Vec<Tensor> {
    let mut pts: Vec<Tensor> = d.params.tensors().cloned().collect();
    pts.push(normal_tensor(rng, b, d.config.chunk_dim(), 1.0));
    pts.push(normal_tensor(rng, b, d.config.obs_dim, 1.0));
    pts
}

fn bound(d: &DenoiserParams, ids: &[NodeId]) -> BoundDenoiser {
    BoundDenoiser { config: d.config.clone(), ids: ids[..d.params.len()].to_vec() }
}

fn weighted_sum(g: &mut Graph, x: NodeId, w: &Tensor) -> diffpolicy::autodiff::Result<NodeId> {
    let c = g.constant(w.clone());
    let p = g.mul(x, c)?;
    g.sum(p)
}

fn fd_denoiser(seed: u64) -> Option<f64> {
    let mut rng = instance(seed, 1, Stream::Probe);
    let placement = HookPlacement::ALL[seed as usize % 3];
    let d = tiny_denoiser(3, 2, placement, seed);
    let b = 3;
    let pts = net_points(&d, &mut rng, b);
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=50)).collect();
    let ce = normal_tensor(&mut rng, b, d.config.chunk_dim(), 1.0);
    let ch = normal_tensor(&mut rng, b, 4, 1.0);
    let n = d.params.len();
    let r = finite_diff_report(
        |g, ids| {
            let out = bound(&d, ids).forward(g, ids[n], ids[n + 1], &ts).map_err(to_ad)?;
            let a = weighted_sum(g, out.eps, &ce)?;
            let h = weighted_sum(g, out.hook(), &ch)?;
            g.add(a, h)
        },
        &pts,
        FD_STEP,
    )
    .unwrap();
    (r.kink_margin > KINK_MARGIN).then_some(r.max_rel_error)
}

fn fd_diffusion_loss(seed: u64) -> Option<f64> {
    let mut rng = instance(seed, 2, Stream::Probe);
    let d = tiny_denoiser(4, 2, HookPlacement::Mid, seed);
    let b = 4;
    let pts = net_points(&d, &mut rng, b);
    let noise = normal_tensor(&mut rng, b, d.config.chunk_dim(), 1.0);
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=100)).collect();
    let n = d.params.len();
    let r = finite_diff_report(
        |g, ids| {
            let out = bound(&d, ids).forward(g, ids[n], ids[n + 1], &ts).map_err(to_ad)?;
            let z = g.constant(noise.clone());
            ddpm_loss_node(g, out.eps, z).map_err(to_ad)
        },
        &pts,
        FD_STEP,
    )
    .unwrap();
    (r.kink_margin > KINK_MARGIN).then_some(r.max_rel_error)
}

fn fd_value(seed: u64) -> Option<f64> {
    let mut rng = instance(seed, 3, Stream::Probe);
    let v = ValueParams::init(ValueConfig { obs_dim: 5, hidden: vec![6, 6] }, &mut stream(seed, Stream::Init)).unwrap();
    let mut pts: Vec<Tensor> = v.params.tensors().cloned().collect();
    pts.push(normal_tensor(&mut rng, 4, 5, 1.0));
    let targets = normal_tensor(&mut rng, 4, 1, 1.0);
    let n = v.params.len();
    let r = finite_diff_report(
        |g, ids| {
            let out = v.forward_graph(g, &ids[..n], ids[n]).map_err(to_ad)?;
            let t = g.constant(targets.clone());
            let e = g.sub(out, t)?;
            let s = g.square(e)?;
            g.mean(s)
        },
        &pts,
        FD_STEP,
    )
    .unwrap();
    (r.kink_margin > KINK_MARGIN).then_some(r.max_rel_error)
}

fn random_features(rng: &mut Rng) -> Tensor {
    let b = rng.random_range(2..=8);
    let dim = rng.random_range(1..=16);
    normal_tensor(rng, b, dim, 1.0)
}

fn fd_dispersive(seed: u64, variant: usize) -> Option<f64> {
    let mut rng = instance(seed, 4 + variant as u64, Stream::Probe);
    let h = random_features(&mut rng);
    let tau = rng.random_range(0.2..2.0);
    let diag = rng.random_bool(0.5);
    let r = finite_diff_report(
        |g, ids| match variant {
            0 => infonce_l2_node(g, ids[0], tau, diag).map_err(to_ad),
            1 => infonce_cos_node(g, ids[0], tau, diag).map_err(to_ad),
            _ => hinge_node(g, ids[0], 2.0 * tau).map_err(to_ad),
        },
        std::slice::from_ref(&h),
        FD_STEP,
    )
    .unwrap();
    (r.kink_margin > KINK_MARGIN).then_some(r.max_rel_error)
}

struct PpoParts {
    spec: EnvSpec,
    norm: ObsNormalizer,
    sched: NoiseSchedule,
    denoiser: DenoiserParams,
    value: ValueParams,
}

fn ppo_parts(seed: u64, k_ft: usize) -> PpoParts {
    let spec = EnvSpec::new(EnvKind::ReachEasy, 2).unwrap();
    let denoiser = tiny_denoiser(spec.obs_dim, 2, HookPlacement::Late, seed);
    let value = ValueParams::init(ValueConfig { obs_dim: spec.obs_dim, hidden: vec![4] }, &mut instance(seed, 1, Stream::Init)).unwrap();
    let sched = subsample_schedule(&make_schedule(2 * k_ft, 1e-4, 0.2).unwrap(), k_ft).unwrap();
    PpoParts { norm: ObsNormalizer::identity(spec.obs_dim), spec, sched, denoiser, value }
}

fn ppo_buffer(p: &PpoParts, n_envs: usize, n_steps: usize, seed: u64) -> RolloutBuffer {
    let setup = RolloutSetup {
        spec: &p.spec,
        normalizer: &p.norm,
        sched: &p.sched,
        n_envs,
        n_steps,
        min_std: 0.1,
        exec: Execution::Sequential,
    };
    let mut b = collect_rollouts(&p.denoiser, &p.value, &setup, seed).unwrap();
    compute_gae(&mut b, 0.99, 0.95, true).unwrap();
    b
}

fn perturbed_total(p: &PpoParts, buf: &RolloutBuffer, steps: &[Vec<(usize, f64)>], slot: usize, c: usize, delta: f64) -> f64 {
    let (mut d, mut v) = (p.denoiser.clone(), p.value.clone());
    let nd = d.params.len();
    let t = if slot < nd { d.params.tensors_mut().nth(slot) } else { v.params.tensors_mut().nth(slot - nd) }.unwrap();
    t.data_mut()[c] += delta;
    let idx: Vec<usize> = (0..buf.len()).collect();
    let s = LossSettings { clip: 0.2, vf_coef: 0.5, disp: None };
    minibatch_loss(&d, &v, buf, &idx, steps, &p.sched, &s).unwrap().total
}

fn fd_ppo(seed: u64) -> Option<f64> {
    let mut p = ppo_parts(seed, 4);
    // Zero-initialized biases put dead rows exactly on a ReLU kink.
    let mut jitter = instance(seed, 8, Stream::Probe);
    for t in p.denoiser.params.tensors_mut().chain(p.value.params.tensors_mut()) {
        for x in t.data_mut() {
            *x += 0.1 * jitter.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let mut buf = ppo_buffer(&p, 2, 3, seed);
    let mut rng = instance(seed, 9, Stream::Probe);
    // Shift the stored log-probs so that ratios spread over both branches.
    for s in &mut buf.steps {
        for lp in &mut s.old_log_probs {
            *lp += rng.random_range(-0.4..0.4);
        }
    }
    let steps: Vec<Vec<(usize, f64)>> =
        (0..buf.len()).map(|_| sample_denoise_steps(4, 2, StepWeighting::Unbiased, &mut rng).unwrap()).collect();
    let idx: Vec<usize> = (0..buf.len()).collect();
    let s = LossSettings { clip: 0.2, vf_coef: 0.5, disp: None };
    let e = minibatch_loss(&p.denoiser, &p.value, &buf, &idx, &steps, &p.sched, &s).unwrap();
    let analytic: Vec<&Vec<f64>> = e.actor_grads.iter().chain(&e.critic_grads).collect();
    let mut worst = 0.0f64;
    for (slot, g) in analytic.iter().enumerate() {
        for (c, an) in g.iter().enumerate() {
            let plus = perturbed_total(&p, &buf, &steps, slot, c, FD_STEP);
            let minus = perturbed_total(&p, &buf, &steps, slot, c, -FD_STEP);
            let num = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max((an - num).abs() / an.abs().max(1.0));
        }
    }
    Some(worst)
}

fn to_ad(e: diffpolicy::Error) -> diffpolicy::autodiff::AutodiffError {
    match e {
        diffpolicy::Error::Autodiff(a) => a,
        other => panic!("{other}"),
    }
}

fn criterion_1() -> Outcome {
    let checks: [(&str, Box<dyn Fn(u64) -> Option<f64>>); 7] = [
        ("denoiser", Box::new(fd_denoiser)),
        ("diffusion loss", Box::new(fd_diffusion_loss)),
        ("value net", Box::new(fd_value)),
        ("infonce_l2", Box::new(|s| fd_dispersive(s, 0))),
        ("infonce_cos", Box::new(|s| fd_dispersive(s, 1))),
        ("hinge", Box::new(|s| fd_dispersive(s, 2))),
        ("ppo surrogate + value loss", Box::new(fd_ppo)),
    ];
    let mut parts = Vec::new();
    for (name, check) in &checks {
        let (worst, redraws) = fd_instances(check);
        ensure!(worst <= FD_TOL, "{name}: max relative error {worst:.2e}");
        parts.push(format!("{name} {worst:.1e}{}", if redraws > 0 { format!(" ({redraws} kink redraws)") } else { String::new() }));
    }
    Ok(format!("100 instances each, max rel err: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 2. Dispersive oracles
// ---------------------------------------------------------------------------

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn sq_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cos_dissim(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn brute_infonce(h: &[Vec<f64>], tau: f64, diag: bool, dist: fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut terms = Vec::new();
    for i in 0..h.len() {
        for j in 0..h.len() {
            if diag || i != j {
                terms.push(-dist(&h[i], &h[j]) / tau);
            }
        }
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (terms.iter().map(|t| (t - m).exp()).sum::<f64>() / terms.len() as f64).ln()
}

fn brute_hinge(h: &[Vec<f64>], margin: f64) -> f64 {
    let b = h.len();
    let mut s = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                s += (margin - sq_l2(&h[i], &h[j])).max(0.0).powi(2);
            }
        }
    }
    s / (b * (b - 1)) as f64
}

/// Autodiff gradient of anchor `i`'s term with respect to `h_i`.
fn anchor_grad(h: &Tensor, i: usize, tau: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.param(h.clone());
    let d = g.pairwise_sq_dist(x).unwrap();
    let row = g.select_rows(d, &[i]).unwrap();
    let s = g.scale(row, -1.0 / tau).unwrap();
    let l = g.log_mean_exp(s, None).unwrap();
    g.backward(l).unwrap().wrt(x).row(i).to_vec()
}

fn criterion_2() -> Outcome {
    let mut rng = stream(2, Stream::Probe);
    let (mut worst_loss, mut worst_grad) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let t = random_features(&mut rng);
        let h = rows_of(&t);
        let fb = FeatureBatch::from_rows(&h).unwrap();
        let tau = rng.random_range(0.1..2.0);
        let margin = rng.random_range(0.1..4.0);
        for diag in [true, false] {
            worst_loss = worst_loss.max((disp_infonce_l2(&fb, tau, diag).unwrap() - brute_infonce(&h, tau, diag, sq_l2)).abs());
            worst_loss =
                worst_loss.max((disp_infonce_cos(&fb, tau, diag).unwrap() - brute_infonce(&h, tau, diag, cos_dissim)).abs());
        }
        worst_loss = worst_loss.max((disp_hinge(&fb, margin).unwrap() - brute_hinge(&h, margin)).abs());
        let closed = disp_grad_reference(&fb, tau).unwrap();
        for (i, row) in closed.iter().enumerate() {
            for (a, b) in row.iter().zip(anchor_grad(&t, i, tau)) {
                worst_grad = worst_grad.max((a - b).abs());
            }
        }
    }
    ensure!(worst_loss <= 1e-10, "loss deviation {worst_loss:.2e}");
    ensure!(worst_grad <= 1e-8, "attention-weight gradient deviation {worst_grad:.2e}");
    Ok(format!("1000 instances, max loss err {worst_loss:.1e}, max grad err {worst_grad:.1e}"))
}

// ---------------------------------------------------------------------------
// 3. Diffusion algebra
// ---------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let base = make_schedule(100, 1e-4, 0.02).unwrap();
    ensure!(base.alpha_bars().windows(2).all(|w| w[1] < w[0]), "alpha_bar not strictly decreasing");
    ensure!(base.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0), "alpha_bar outside (0, 1)");
    for k_ft in [1, 2, 4, 5, 10, 20, 25, 50, 100] {
        let sub = subsample_schedule(&base, k_ft).unwrap();
        let stride = 100 / k_ft;
        for j in 1..=k_ft {
            ensure!(
                sub.alpha_bar(j).unwrap().to_bits() == base.alpha_bar(j * stride).unwrap().to_bits(),
                "subsampled alpha_bar differs at K_ft={k_ft}, j={j}"
            );
        }
    }
    // Hand values: beta = [0.1, 0.2] gives alpha_bar = [0.9, 0.72].
    let two = diffpolicy::diffusion::NoiseSchedule::from_betas(vec![0.1, 0.2], Default::default()).unwrap();
    let x = forward_noise(&[1.0], 2, &[1.0], &two).unwrap()[0];
    ensure!((x - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-15, "hand forward_noise {x}");
    let m = reverse_mean(&[1.0], &[1.0], 2, &two).unwrap()[0];
    ensure!((m - (1.0 - 0.2 / 0.28f64.sqrt()) / 0.8f64.sqrt()).abs() < 1e-15, "hand reverse_mean {m}");

    let mut rng = stream(3, Stream::Probe);
    let mut worst_lp = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=8);
        let k = rng.random_range(1..=100);
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ab = base.alpha_bar(k).unwrap();
        let want: Vec<f64> = a.iter().zip(&e).map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e).collect();
        ensure!(forward_noise(&a, k, &e, &base).unwrap() == want, "forward_noise differs at k={k}");
        let c1 = 1.0 / base.alpha(k).unwrap().sqrt();
        let c2 = base.beta(k).unwrap() / (1.0 - ab).sqrt();
        let want: Vec<f64> = a.iter().zip(&e).map(|(a, e)| c1 * (a - c2 * e)).collect();
        ensure!(reverse_mean(&a, &e, k, &base).unwrap() == want, "reverse_mean differs at k={k}");
        let std: f64 = rng.random_range(0.05..2.0);
        let closed: f64 = a
            .iter()
            .zip(&e)
            .map(|(x, mu)| -0.5 * (2.0 * std::f64::consts::PI).ln() - std.ln() - (x - mu).powi(2) / (2.0 * std * std))
            .sum();
        worst_lp = worst_lp.max((gaussian_logprob(&a, &e, std) - closed).abs());
    }
    ensure!(worst_lp <= 1e-12, "Gaussian log-prob deviation {worst_lp:.2e}");

    // Recorded chain log-probs against recomputation through the network.
    let sched = subsample_schedule(&make_schedule(20, 1e-4, 0.02).unwrap(), 10).unwrap();
    let mut worst_chain = 0.0f64;
    for seed in 0..20 {
        let d = tiny_denoiser(4, 2, HookPlacement::Early, seed);
        let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let chain = sample_chain(&d, &obs, &sched, 0.1, &mut instance(seed, 0, Stream::Policy)).unwrap();
        let again = chain_logprob(&d, &chain, &obs, &sched, 0.1).unwrap();
        for j in 0..chain.transitions() {
            let closed = gaussian_logprob(&chain.states[j + 1], &chain.means[j], chain.stds[j]);
            worst_chain = worst_chain.max((again[j] - chain.log_probs[j]).abs()).max((closed - chain.log_probs[j]).abs());
        }
    }
    ensure!(worst_chain <= 1e-12, "chain log-prob deviation {worst_chain:.2e}");
    Ok(format!("exact schedule/noise/mean identities, log-prob err {worst_lp:.1e}, chain err {worst_chain:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. GAE oracle
// ---------------------------------------------------------------------------

fn nested_gae(r: &[f64], v: &[f64], d: &[bool], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let next_v = |s: usize| if s + 1 < n { v[s + 1] } else { boot };
    let delta = |s: usize| r[s] + gamma * next_v(s) * if d[s] { 0.0 } else { 1.0 } - v[s];
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for l in 0..n - t {
                let alive = (t..t + l).all(|m| !d[m]);
                if alive {
                    total += (gamma * lambda).powi(l as i32) * delta(t + l);
                }
            }
            total
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut rng = stream(4, Stream::Probe);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for t_len in 1..=16 {
        for _ in 0..1000 / 16 + 1 {
            let r: Vec<f64> = (0..t_len).map(|_| rng.random_range(-5.0..5.0)).collect();
            let v: Vec<f64> = (0..t_len).map(|_| rng.random_range(-5.0..5.0)).collect();
            let d: Vec<bool> = (0..t_len).map(|_| rng.random_bool(0.2)).collect();
            let boot = rng.random_range(-5.0..5.0);
            let gamma = rng.random_range(0.8..=1.0);
            let lambda = rng.random_range(0.0..=1.0);
            let (adv, _) = gae(&r, &v, &d, boot, gamma, lambda).unwrap();
            for (a, b) in adv.iter().zip(nested_gae(&r, &v, &d, boot, gamma, lambda)) {
                worst = worst.max((a - b).abs());
            }
            cases += 1;
        }
    }
    ensure!(worst <= 1e-10, "max deviation {worst:.2e}");
    Ok(format!("{cases} instances with T in 1..=16, max err {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. Importance-sampling unbiasedness
// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let k_ft = 10;
    let size = 3;
    let p = ppo_parts(5, k_ft);
    let buf = ppo_buffer(&p, 2, 3, 5);
    let idx: Vec<usize> = (0..buf.len()).collect();
    let s = LossSettings { clip: 0.01, vf_coef: 0.5, disp: None };
    let full_steps: Vec<Vec<(usize, f64)>> = vec![(1..=k_ft).map(|k| (k, 1.0)).collect(); idx.len()];
    let full = minibatch_loss(&p.denoiser, &p.value, &buf, &idx, &full_steps, &p.sched, &s).unwrap();
    let full_g: Vec<f64> = full.actor_grads.concat();

    let mut rng = stream(5, Stream::Steps);
    let exact_steps: Vec<_> =
        idx.iter().map(|_| sample_denoise_steps(k_ft, k_ft, StepWeighting::Unbiased, &mut rng).unwrap()).collect();
    let exact = minibatch_loss(&p.denoiser, &p.value, &buf, &idx, &exact_steps, &p.sched, &s).unwrap();
    ensure!(exact == full, "|S| = K_ft is not bit-identical to the full sum");

    let n = 10_000;
    let dim = full_g.len();
    let (mut sum, mut sum_sq) = (vec![0.0; dim], vec![0.0; dim]);
    for _ in 0..n {
        let steps: Vec<_> =
            idx.iter().map(|_| sample_denoise_steps(k_ft, size, StepWeighting::Unbiased, &mut rng).unwrap()).collect();
        let e = minibatch_loss(&p.denoiser, &p.value, &buf, &idx, &steps, &p.sched, &s).unwrap();
        for (c, g) in e.actor_grads.iter().flatten().enumerate() {
            sum[c] += g;
            sum_sq[c] += g * g;
        }
    }
    let (mut worst_z, mut outside) = (0.0f64, 0);
    for c in 0..dim {
        let mean = sum[c] / n as f64;
        let var = (sum_sq[c] / n as f64 - mean * mean).max(0.0) * n as f64 / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let diff = (mean - full_g[c]).abs();
        if se <= 1e-15 * full_g[c].abs().max(1.0) {
            if diff > 1e-12 * full_g[c].abs().max(1.0) {
                outside += 1;
            }
            continue;
        }
        let z = diff / se;
        worst_z = worst_z.max(z);
        if z > 3.0 {
            outside += 1;
        }
    }
    ensure!(outside == 0, "{outside} of {dim} coordinates outside 3 standard errors (max z {worst_z:.2})");
    Ok(format!("{n} resamples of |S|={size} of K_ft={k_ft}, {dim} coordinates, max z {worst_z:.2}; |S|=K_ft bit-identical"))
}

// ---------------------------------------------------------------------------
// 6. PPO mechanics
// ---------------------------------------------------------------------------

/// `-(1/(M K)) sum A_t log p` written with elementary graph ops; its
/// gradient is the unclipped policy gradient.
fn reinforce_grad(p: &PpoParts, buf: &RolloutBuffer) -> Vec<Vec<f64>> {
    let k_ft = p.sched.steps();
    let m = buf.len() as f64;
    let (mut noisy, mut obs, mut target, mut ts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut c1, mut c2, mut coef) = (Vec::new(), Vec::new(), Vec::new());
    for (i, s) in buf.steps.iter().enumerate() {
        for j in 0..k_ft {
            let k = s.chain.timestep(j);
            let dim = s.chain.states[j].len();
            noisy.push(s.chain.states[j].clone());
            target.push(s.chain.states[j + 1].clone());
            obs.push(s.obs.clone());
            ts.push(p.sched.net_timestep(k).unwrap());
            let a = 1.0 / p.sched.alpha(k).unwrap().sqrt();
            let b = p.sched.beta(k).unwrap() / (1.0 - p.sched.alpha_bar(k).unwrap()).sqrt();
            let std = s.chain.stds[j];
            c1.push(vec![a; dim]);
            c2.push(vec![b; dim]);
            // loss = -w A logp = w A |target - mu|^2 / (2 std^2) + const
            coef.push(vec![buf.advantages[i] / (k_ft as f64 * m) / (2.0 * std * std); dim]);
        }
    }
    let t = |rows: &Vec<Vec<f64>>| Tensor::from_rows(rows).unwrap();
    let mut g = Graph::new();
    let actor = p.denoiser.bind(&mut g, true);
    let x = g.constant(t(&noisy));
    let o = g.constant(t(&obs));
    let out = actor.forward(&mut g, x, o, &ts).unwrap();
    let c2n = g.constant(t(&c2));
    let scaled = g.mul(out.eps, c2n).unwrap();
    let diff = g.sub(x, scaled).unwrap();
    let c1n = g.constant(t(&c1));
    let mu = g.mul(diff, c1n).unwrap();
    let tg = g.constant(t(&target));
    let err = g.sub(tg, mu).unwrap();
    let sq = g.square(err).unwrap();
    let cn = g.constant(t(&coef));
    let w = g.mul(sq, cn).unwrap();
    let loss = g.sum(w).unwrap();
    ParamSet::collect_grads(&actor.ids, &g.backward(loss).unwrap())
}

fn criterion_6() -> Outcome {
    let p = ppo_parts(6, 4);
    let buf = ppo_buffer(&p, 3, 3, 6);
    let idx: Vec<usize> = (0..buf.len()).collect();
    let steps: Vec<Vec<(usize, f64)>> = vec![(1..=4).map(|k| (k, 1.0)).collect(); idx.len()];
    let s = LossSettings { clip: 0.01, vf_coef: 0.5, disp: None };
    let e = minibatch_loss(&p.denoiser, &p.value, &buf, &idx, &steps, &p.sched, &s).unwrap();
    ensure!(e.mean_ratio == 1.0 && e.clip_fraction == 0.0 && e.approx_kl == 0.0, "ratio not exactly 1: {e:?}");
    let mean_adv = buf.advantages.iter().sum::<f64>() / buf.len() as f64;
    ensure!((e.policy_loss + mean_adv).abs() <= 1e-12, "surrogate {} vs -mean(A) {}", e.policy_loss, -mean_adv);
    let want = reinforce_grad(&p, &buf);
    let mut worst = 0.0f64;
    for (a, w) in e.actor_grads.iter().flatten().zip(want.iter().flatten()) {
        worst = worst.max((a - w).abs() / w.abs().max(1.0));
    }
    ensure!(worst <= 1e-12, "unit-ratio gradient differs from the policy gradient by {worst:.2e}");

    let clip = 0.01;
    for (new, adv) in [(0.5, 2.0), (0.02, 0.3), (-0.5, -1.5), (-0.02, -0.7)] {
        let mut g = Graph::new();
        let lp = g.param(Tensor::matrix(1, 1, vec![new]).unwrap());
        let old = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let a = g.constant(Tensor::matrix(1, 1, vec![adv]).unwrap());
        let t = clipped_objective_node(&mut g, lp, old, a, clip).unwrap();
        let bound = if adv > 0.0 { 1.0 + clip } else { 1.0 - clip };
        ensure!(g.scalar_value(t.objective) == bound * adv, "clipped value at log-ratio {new}");
        ensure!(g.backward(t.objective).unwrap().wrt(lp).item() == 0.0, "clipped branch has gradient at {new}");
    }

    let mut rng = stream(6, Stream::Probe);
    for _ in 0..100_000 {
        let r: f64 = rng.random_range(0.0..3.0);
        let adv: f64 = rng.random_range(-5.0..5.0);
        let obj = clipped_objective(r, adv, clip);
        let (unclipped, clipped) = (r * adv, r.clamp(1.0 - clip, 1.0 + clip) * adv);
        ensure!(obj <= unclipped && obj <= clipped, "objective {obj} above a branch at r={r}, A={adv}");
        ensure!(obj == unclipped || obj == clipped, "objective {obj} is neither branch at r={r}, A={adv}");
    }
    Ok(format!("ratio exactly 1, surrogate = -mean(A), gradient err {worst:.1e}; zero clipped gradient; pessimism on 1e5 draws"))
}

// ---------------------------------------------------------------------------
// Desk-scale runs
// ---------------------------------------------------------------------------

fn desk_denoiser(spec: &EnvSpec, seed: u64) -> DenoiserParams {
    let cfg = DenoiserConfig {
        obs_dim: spec.obs_dim,
        action_dim: spec.action_dim,
        horizon: spec.horizon,
        obs_embed_dim: 32,
        time_embed_dim: 16,
        time_proj_dim: 16,
        trunk: vec![64; 3],
        placement: spec.kind.default_placement(),
    };
    DenoiserParams::init(cfg, &mut stream(seed, Stream::Init)).unwrap()
}

fn desk_pretrain(
    spec: &EnvSpec,
    data: &diffpolicy::envs::DemoDataset,
    sched: &NoiseSchedule,
    iterations: usize,
    eval_episodes: usize,
    disp: &DispersiveConfig,
    seed: u64,
) -> (DenoiserParams, Option<f64>) {
    let cfg = PretrainConfig { iterations, batch_size: 64, lr: 1e-3, eval_every: 0, eval_episodes, log_every: 100 };
    let setup =
        PretrainSetup { config: &cfg, dataset: data, sched, disp, eval_min_std: 0.0, exec: Execution::Parallel };
    let out = run_pretrain(&setup, PretrainState::new(desk_denoiser(spec, seed), cfg.lr, seed), |_| Ok(())).unwrap();
    let eval = out.rows.last().and_then(|r| r.eval_success);
    (out.state.denoiser, eval)
}

fn criterion_7() -> Outcome {
    let spec = EnvSpec::new(EnvKind::ReachEasy, 4).unwrap();
    let sched = make_schedule(20, 1e-4, 0.02).unwrap();
    let disp = DispersiveConfig::default();
    let mut rates = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 0..5 {
        let start = Instant::now();
        let data = gen_demos(&spec, 100, seed).unwrap();
        let (_, eval) = desk_pretrain(&spec, &data, &sched, 2000, 50, &disp, seed);
        slowest = slowest.max(start.elapsed().as_secs_f64());
        rates.push(eval.unwrap());
    }
    let med = median(rates.clone());
    ensure!(med >= 0.8, "median success {med} over {rates:?}");
    ensure!(slowest <= 300.0, "slowest run {slowest:.0}s");
    Ok(format!("final success {rates:?}, median {med}, slowest run {slowest:.1}s"))
}

fn criterion_8() -> Outcome {
    let spec = EnvSpec::new(EnvKind::CorridorPrecision, 4).unwrap();
    let sched = make_schedule(20, 1e-4, 0.02).unwrap();
    let hook = spec.kind.default_placement();
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let data = gen_demos(&spec, 100, seed).unwrap();
        let mut spread = Vec::new();
        for lambda in [0.0, 0.5] {
            let disp = DispersiveConfig { lambda, tau: 0.5, ..Default::default() };
            let (d, _) = desk_pretrain(&spec, &data, &sched, 2000, 0, &disp, seed);
            let r = collapse_report(&d, &data, &[hook], &sched, &ProbeConfig::default(), &disp, seed).unwrap();
            spread.push(r[0].mean_pairwise);
        }
        pairs.push((spread[0], spread[1]));
    }
    let fmt: Vec<String> = pairs.iter().map(|(a, b)| format!("{a:.3}->{b:.3}")).collect();
    ensure!(pairs.iter().all(|(base, disp)| disp > base), "{} hook-layer mean pairwise distance, lambda 0 -> 0.5", fmt.join(", "));
    Ok(format!("{} hook layer, lambda 0 -> 0.5 mean pairwise distance: {}", hook.as_str(), fmt.join(", ")))
}

fn criterion_9() -> Outcome {
    let spec = EnvSpec::new(EnvKind::CorridorPrecision, 4).unwrap();
    let sched = make_schedule(20, 1e-4, 0.02).unwrap();
    let ft_sched = subsample_schedule(&sched, 10).unwrap();
    let disp = DispersiveConfig::default();
    let cfg = FinetuneConfig {
        iterations: 200,
        n_envs: 20,
        n_steps: 15,
        step_samples: 3,
        epochs: 5,
        eval_every: 50,
        eval_episodes: 100,
        ..FinetuneConfig::default()
    };
    let mut gains = Vec::new();
    let mut detail = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 0..3 {
        let start = Instant::now();
        let data = gen_demos(&spec, 100, seed).unwrap();
        let (denoiser, _) = desk_pretrain(&spec, &data, &sched, 300, 0, &disp, seed);
        let value =
            ValueParams::init(ValueConfig { obs_dim: spec.obs_dim, hidden: cfg.value_hidden.clone() }, &mut stream(seed, Stream::Init))
                .unwrap();
        let setup = FinetuneSetup {
            config: &cfg,
            spec: &spec,
            normalizer: &data.normalizer,
            sched: &ft_sched,
            disp: &disp,
            exec: Execution::Parallel,
        };
        let out = run_finetune(&setup, FinetuneState::new(denoiser, value, &cfg, seed), |_| Ok(())).unwrap();
        let before = out.initial_eval.unwrap();
        let after = out.rows.last().and_then(|r| r.eval_success).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        gains.push(100.0 * (after - before));
        detail.push(format!("{before:.2}->{after:.2}"));
    }
    let med = median(gains.clone());
    ensure!(med >= 20.0, "median gain {med:.0} points ({})", detail.join(", "));
    ensure!(slowest <= 900.0, "slowest run {slowest:.0}s");
    Ok(format!("eval success {}, median gain {med:.0} points, slowest run {slowest:.1}s", detail.join(", ")))
}

// ---------------------------------------------------------------------------
// 10. Determinism
// ---------------------------------------------------------------------------

const CLI_SETTINGS: &[&str] = &[
    "--deterministic",
    "--seed",
    "11",
    "--set",
    "network.trunk=[16,16,16]",
    "--set",
    "diffusion.steps=10",
    "--set",
    "finetune.k_finetune=5",
    "--set",
    "finetune.step_samples=2",
    "--set",
    "demos.trajectories=10",
    "--set",
    "pretrain.iterations=40",
    "--set",
    "pretrain.eval_every=20",
    "--set",
    "pretrain.eval_episodes=5",
    "--set",
    "finetune.iterations=3",
    "--set",
    "finetune.n_envs=3",
    "--set",
    "finetune.n_steps=4",
    "--set",
    "finetune.eval_every=1",
    "--set",
    "finetune.eval_episodes=4",
    "--set",
    "eval.episodes=20",
];

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_diffpolicy"))
        .current_dir(dir)
        .env_remove("DIFFPOLICY_SEED")
        .args(args)
        .args(CLI_SETTINGS)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let stages: [(&str, &[&str], &[&str]); 5] = [
        ("gen-demos", &[], &["demos.txt"]),
        ("pretrain", &["--set", "inputs.dataset=gen-demos-1/demos.txt"], &["metrics.csv", "final.ckpt", "best.ckpt"]),
        ("finetune", &["--set", "inputs.checkpoint=pretrain-1/final.ckpt"], &["metrics.csv", "final.ckpt", "best.ckpt"]),
        ("eval", &["--set", "inputs.checkpoint=finetune-1/final.ckpt"], &["eval.csv"]),
        (
            "diagnose",
            &["--set", "inputs.checkpoint=pretrain-1/final.ckpt", "--set", "inputs.dataset=gen-demos-1/demos.txt"],
            &["dispersion.txt"],
        ),
    ];
    let mut compared = 0;
    for (stage, extra, files) in stages {
        for run in 1..=2 {
            let out = format!("{stage}-{run}");
            cli(d, &[&[stage, "--out", out.as_str()][..], extra].concat())?;
        }
        for f in files.iter().chain(&["seed.txt"]) {
            let a = std::fs::read(d.join(format!("{stage}-1")).join(f)).map_err(|e| format!("{stage}/{f}: {e}"))?;
            let b = std::fs::read(d.join(format!("{stage}-2")).join(f)).map_err(|e| format!("{stage}/{f}: {e}"))?;
            ensure!(a == b, "{stage}/{f} differs between reruns");
            compared += 1;
        }
    }
    Ok(format!("{compared} artifacts byte-identical across reruns of all five subcommands"))
}
