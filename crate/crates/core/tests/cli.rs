//! End-to-end runs of the `diffpolicy` binary.

use std::path::Path;
use std::process::{Command, Output};

use diffpolicy::envs::{Controller, EnvKind, EnvSpec, EnvState};
use diffpolicy::exec::Execution;
use diffpolicy::metrics::read_csv;
use diffpolicy::pretrain::evaluate_controller;
use diffpolicy::rng::Rng;
use rand::Rng as _;

const TINY: &[&str] = &[
    "--set",
    "network.trunk=[16,16,16]",
    "--set",
    "network.obs_embed=8",
    "--set",
    "network.time_embed=8",
    "--set",
    "network.time_proj=8",
    "--set",
    "diffusion.steps=10",
    "--set",
    "finetune.k_finetune=5",
    "--set",
    "finetune.step_samples=2",
    "--set",
    "demos.trajectories=10",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffpolicy"))
        .current_dir(dir)
        .env_remove("DIFFPOLICY_SEED")
        .args(args)
        .args(TINY)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn full_pipeline_on_reach_easy() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-demos", "--out", "demos"]);
    let demos = read(d.join("demos/demos.txt"));
    ok(d, &[
        "pretrain", "--out", "pre", "--set", "inputs.dataset=demos/demos.txt",
        "--set", "pretrain.iterations=40", "--set", "pretrain.eval_every=20", "--set", "pretrain.eval_episodes=5",
    ]);
    let (header, rows) = read_csv(&d.join("pre/metrics.csv")).unwrap();
    assert_eq!(header.join(","), diffpolicy::metrics::PRETRAIN_HEADER);
    assert_eq!(rows.len(), 4);
    assert!(d.join("pre/best.ckpt").exists() && d.join("pre/final.ckpt").exists());

    ok(d, &[
        "finetune", "--out", "ft", "--set", "inputs.checkpoint=pre/final.ckpt",
        "--set", "finetune.iterations=2", "--set", "finetune.n_envs=3", "--set", "finetune.n_steps=4",
        "--set", "finetune.eval_episodes=4", "--set", "finetune.eval_every=1", "--set", "finetune.minibatches=2",
    ]);
    let (header, rows) = read_csv(&d.join("ft/metrics.csv")).unwrap();
    assert_eq!(header.join(","), diffpolicy::metrics::FINETUNE_HEADER);
    assert_eq!(rows.len(), 3);

    let stdout = ok(d, &["eval", "--out", "ev", "--set", "inputs.checkpoint=ft/final.ckpt", "--set", "eval.episodes=10"]);
    assert!(stdout.contains("success_rate="), "{stdout}");
    ok(d, &["diagnose", "--out", "dg", "--set", "inputs.checkpoint=pre/final.ckpt", "--set", "inputs.dataset=demos/demos.txt"]);
    let report = String::from_utf8(read(d.join("dg/dispersion.txt"))).unwrap();
    for p in ["placement=early", "placement=mid", "placement=late", "participation_ratio="] {
        assert!(report.contains(p), "{report}");
    }
    for sub in ["demos", "pre", "ft", "ev", "dg"] {
        assert_eq!(String::from_utf8(read(d.join(sub).join("seed.txt"))).unwrap(), "42\n");
        assert!(d.join(sub).join("config.toml").exists());
    }
    assert_eq!(read(d.join("demos/demos.txt")), demos, "inputs are never modified");
}

#[test]
fn snapshot_reproduces_metrics_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-demos", "--out", "demos", "--seed", "5"]);
    let args = [
        "--deterministic", "--seed", "5", "--set", "inputs.dataset=demos/demos.txt",
        "--set", "pretrain.iterations=30", "--set", "pretrain.eval_every=15", "--set", "pretrain.eval_episodes=4",
    ];
    ok(d, &[&["pretrain", "--out", "a"][..], &args].concat());
    ok(d, &["pretrain", "--config", "a/config.toml", "--out", "b"]);
    assert_eq!(read(d.join("a/metrics.csv")), read(d.join("b/metrics.csv")));
    assert_eq!(read(d.join("a/final.ckpt")), read(d.join("b/final.ckpt")));
    assert_eq!(String::from_utf8(read(d.join("b/seed.txt"))).unwrap(), "5\n");
}

#[test]
fn seed_environment_variable_is_used() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_diffpolicy"))
        .current_dir(tmp.path())
        .env("DIFFPOLICY_SEED", "77")
        .args(["gen-demos", "--out", "x", "--set", "demos.trajectories=2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(tmp.path().join("x/seed.txt")).unwrap(), "77\n");
}

#[test]
fn failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(!run(d, &["train"]).status.success());
    let out = run(d, &["pretrain", "--out", "p"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("inputs.dataset"));
    let out = run(d, &["gen-demos", "--set", "dispersive.tau=fast"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dispersive.tau"));
    let out = run(d, &["eval", "--set", "inputs.checkpoint=missing.ckpt"]);
    assert!(!out.status.success());
}

/// Uniform random chunks, the chance-level reference.
struct RandomController;

impl Controller for RandomController {
    fn act(&self, spec: &EnvSpec, _state: &EnvState, _obs: &[f64], rng: &mut Rng) -> diffpolicy::Result<Vec<f64>> {
        Ok((0..spec.chunk_dim()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }
}

#[test]
fn fresh_init_evaluates_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-demos", "--out", "demos"]);
    ok(d, &["pretrain", "--out", "init", "--set", "inputs.dataset=demos/demos.txt", "--set", "pretrain.iterations=0", "--set", "pretrain.eval_episodes=0"]);
    let stdout = ok(d, &["eval", "--out", "ev", "--set", "inputs.checkpoint=init/final.ckpt", "--set", "eval.episodes=200"]);
    let rate: f64 = stdout.split("success_rate=").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    let spec = EnvSpec::new(EnvKind::ReachEasy, 4).unwrap();
    let chance = evaluate_controller(&RandomController, &spec, 2000, 3, Execution::Parallel).unwrap().success_rate;
    assert!((rate - chance).abs() <= 0.1, "fresh init {rate} vs chance {chance}");
}
