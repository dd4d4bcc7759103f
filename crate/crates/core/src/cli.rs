//! Command-line pipeline: demo generation, pre-training, fine-tuning,
//! evaluation, and collapse diagnostics.
//!
//! Every run writes `config.toml` (the resolved configuration, re-usable as
//! `--config`) and `seed.txt` into its output directory. Artifacts:
//!
//! | subcommand | inputs | outputs |
//! |------------|--------|---------|
//! | `gen-demos` | | `demos.txt` |
//! | `pretrain` | `inputs.dataset` | `metrics.csv`, `final.ckpt`, `best.ckpt` |
//! | `finetune` | `inputs.checkpoint` | `metrics.csv`, `final.ckpt`, `best.ckpt` |
//! | `eval` | `inputs.checkpoint` | `eval.csv`, summary on stdout |
//! | `diagnose` | `inputs.checkpoint`, `inputs.dataset` | `dispersion.txt` |

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingState};
use crate::config::{parse_config, RunConfig};
use crate::dataset;
use crate::diagnostics::{collapse_report, reports_to_text};
use crate::diffusion::subsample_schedule;
use crate::envs::{gen_demos, EnvSpec};
use crate::error::{Error, Result};
use crate::finetune::{run_finetune, FinetuneSetup, FinetuneState};
use crate::metrics::{finetune_line, pretrain_line, CsvWriter, FINETUNE_HEADER, PRETRAIN_HEADER};
use crate::networks::{DenoiserParams, HookPlacement, ValueConfig, ValueParams};
use crate::optim::AdamW;
use crate::policy::DiffusionPolicy;
use crate::pretrain::{evaluate_controller, run_pretrain, PretrainSetup, PretrainState};
use crate::rng::{stream, Stream};

#[derive(Debug, Parser)]
#[command(name = "diffpolicy", version, about = "Diffusion policy pre-training and PPO fine-tuning on toy control tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `dispersive.lambda=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Master seed; takes precedence over DIFFPOLICY_SEED and the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Single-threaded execution everywhere.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Roll out the scripted expert and write a demo dataset.
    GenDemos,
    /// Behavior-clone a denoiser on a demo dataset.
    Pretrain,
    /// PPO over the denoising chain from a checkpoint.
    Finetune,
    /// Success rate of a checkpoint.
    Eval,
    /// Dispersion statistics of hook-layer features.
    Diagnose,
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Resolves the configuration, writes the snapshot, and runs the stage.
pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = parse_config(cli.config.as_deref(), &cli.overrides)?;
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let seed = cfg.resolve_seed(cli.seed)?;
    cfg.seed = Some(seed);
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    write(&out.join("seed.txt"), &format!("{seed}\n"))?;
    match cli.command {
        Command::GenDemos => cmd_gen_demos(&cfg, seed, &out),
        Command::Pretrain => cmd_pretrain(&cfg, seed, &out),
        Command::Finetune => cmd_finetune(&cfg, seed, &out),
        Command::Eval => cmd_eval(&cfg, seed, &out),
        Command::Diagnose => cmd_diagnose(&cfg, seed, &out),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Config { path: key.into(), message: "required for this subcommand".into() })
}

fn check_env(cfg: &RunConfig, spec: &EnvSpec, source: &str) -> Result<()> {
    if spec.kind != cfg.env.kind || spec.horizon != cfg.env.horizon {
        return Err(Error::Config {
            path: "env".into(),
            message: format!(
                "{source} was made for {} with horizon {}, config says {} with horizon {}",
                spec.kind, spec.horizon, cfg.env.kind, cfg.env.horizon
            ),
        });
    }
    Ok(())
}

fn cmd_gen_demos(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let data = gen_demos(&cfg.env_spec()?, cfg.demos.trajectories, seed)?;
    let path = out.join("demos.txt");
    dataset::save(&data, &path)?;
    println!("wrote {} trajectories ({} chunks) to {}", data.trajectories.len(), data.num_pairs(), path.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let data = dataset::load(required(&cfg.inputs.dataset, "inputs.dataset")?)?;
    check_env(cfg, &data.spec, "dataset")?;
    let sched = cfg.diffusion.schedule()?;
    let denoiser = DenoiserParams::init(cfg.denoiser_config(&data.spec), &mut stream(seed, Stream::Init))?;
    let setup = PretrainSetup {
        config: &cfg.pretrain,
        dataset: &data,
        sched: &sched,
        disp: &cfg.dispersive,
        eval_min_std: cfg.diffusion.eval_min_std,
        exec: cfg.execution(),
    };
    let mut csv = CsvWriter::create(&out.join("metrics.csv"), PRETRAIN_HEADER)?;
    let outcome = run_pretrain(&setup, PretrainState::new(denoiser, cfg.pretrain.lr, seed), |r| {
        if r.eval_success.is_some() {
            eprintln!("iteration {} eval_success {:?}", r.iteration, r.eval_success.unwrap_or_default());
        }
        csv.line(&pretrain_line(r))
    })?;
    let last_eval = outcome.rows.last().and_then(|r| r.eval_success);
    let wrap = |state, eval_success| Checkpoint {
        env: data.spec.clone(),
        normalizer: data.normalizer.clone(),
        diffusion: cfg.diffusion.clone(),
        finetune_steps: None,
        eval_success,
        state: TrainingState::Pretrain(state),
    };
    if let Some((denoiser, success, iteration)) = outcome.best {
        let opt = AdamW::new(outcome.state.opt.config, &denoiser.params);
        let best = PretrainState { denoiser, opt, iteration, seed, last: None };
        save_checkpoint(&wrap(best, Some(success)), &out.join("best.ckpt"))?;
    }
    save_checkpoint(&wrap(outcome.state, last_eval), &out.join("final.ckpt"))?;
    println!("pretrain done: final eval_success {}", fmt_opt(last_eval));
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let ck = load_checkpoint(required(&cfg.inputs.checkpoint, "inputs.checkpoint")?)?;
    check_env(cfg, &ck.env, "checkpoint")?;
    let fc = &cfg.finetune;
    let sched = subsample_schedule(&ck.diffusion.schedule()?, fc.k_finetune)?;
    let state = match ck.state {
        TrainingState::Pretrain(s) => {
            let vcfg = ValueConfig { obs_dim: ck.env.obs_dim, hidden: fc.value_hidden.clone() };
            let value = ValueParams::init(vcfg, &mut stream(seed, Stream::Init))?;
            FinetuneState::new(s.denoiser, value, fc, seed)
        }
        TrainingState::Finetune(s) => {
            if ck.finetune_steps != Some(fc.k_finetune) {
                return Err(Error::Config {
                    path: "finetune.k_finetune".into(),
                    message: format!("checkpoint was fine-tuned with {:?} steps", ck.finetune_steps),
                });
            }
            s
        }
    };
    let setup = FinetuneSetup {
        config: fc,
        spec: &ck.env,
        normalizer: &ck.normalizer,
        sched: &sched,
        disp: &cfg.dispersive,
        exec: cfg.execution(),
    };
    let mut csv = CsvWriter::create(&out.join("metrics.csv"), FINETUNE_HEADER)?;
    let outcome = run_finetune(&setup, state, |r| {
        if let Some(s) = r.eval_success {
            eprintln!("iteration {} eval_success {s:?}", r.iteration);
        }
        csv.line(&finetune_line(r))
    })?;
    let last_eval = outcome.rows.last().and_then(|r| r.eval_success);
    let wrap = |state, eval_success| Checkpoint {
        env: ck.env.clone(),
        normalizer: ck.normalizer.clone(),
        diffusion: ck.diffusion.clone(),
        finetune_steps: Some(fc.k_finetune),
        eval_success,
        state: TrainingState::Finetune(state),
    };
    if let Some((denoiser, success, iteration)) = outcome.best {
        let mut best = outcome.state.clone();
        best.actor_opt = AdamW::new(best.actor_opt.config, &denoiser.params);
        best.denoiser = denoiser;
        best.iteration = iteration;
        save_checkpoint(&wrap(best, Some(success)), &out.join("best.ckpt"))?;
    }
    save_checkpoint(&wrap(outcome.state, last_eval), &out.join("final.ckpt"))?;
    println!("finetune done: initial eval_success {}, final {}", fmt_opt(outcome.initial_eval), fmt_opt(last_eval));
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let ck = load_checkpoint(required(&cfg.inputs.checkpoint, "inputs.checkpoint")?)?;
    let sched = ck.schedule()?;
    let min_std = if ck.finetune_steps.is_some() { cfg.finetune.eval_min_std } else { cfg.diffusion.eval_min_std };
    let policy = DiffusionPolicy { denoiser: ck.denoiser(), normalizer: &ck.normalizer, sched: &sched, min_std };
    let s = evaluate_controller(&policy, &ck.env, cfg.eval.episodes, seed, cfg.execution())?;
    write(
        &out.join("eval.csv"),
        &format!("episodes,success_rate,mean_return\n{},{:?},{:?}\n", s.episodes, s.success_rate, s.mean_return),
    )?;
    println!("success_rate={} episodes={} mean_return={:.4}", s.success_rate, s.episodes, s.mean_return);
    Ok(())
}

fn cmd_diagnose(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let ck = load_checkpoint(required(&cfg.inputs.checkpoint, "inputs.checkpoint")?)?;
    let data = dataset::load(required(&cfg.inputs.dataset, "inputs.dataset")?)?;
    check_env(cfg, &data.spec, "dataset")?;
    let sched = ck.diffusion.schedule()?;
    let reports = collapse_report(ck.denoiser(), &data, &HookPlacement::ALL, &sched, &cfg.probe, &cfg.dispersive, seed)?;
    write(&out.join("dispersion.txt"), &reports_to_text(&reports))?;
    for r in &reports {
        println!(
            "{:5} mean_pairwise={:.4} min_nn={:.4} participation_ratio={:.3}",
            r.placement.map_or("", HookPlacement::as_str),
            r.mean_pairwise,
            r.min_nn,
            r.participation_ratio
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_fails() {
        assert_ne!(run_command(["diffpolicy", "train"]), 0);
        assert_ne!(run_command(["diffpolicy"]), 0);
        assert_eq!(run_command(["diffpolicy", "--help"]), 0);
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from([
            "diffpolicy",
            "pretrain",
            "--set",
            "a.b=1",
            "--set",
            "c=2",
            "--seed",
            "7",
            "--deterministic",
            "--out",
            "x",
        ])
        .unwrap();
        assert_eq!(cli.command, Command::Pretrain);
        assert_eq!(cli.overrides, vec!["a.b=1", "c=2"]);
        assert_eq!(cli.seed, Some(7));
        assert!(cli.deterministic);
        assert_eq!(cli.out, Some(PathBuf::from("x")));
    }

    #[test]
    fn missing_input_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let cli = Cli::try_parse_from(["diffpolicy", "eval", "--out", out]).unwrap();
        assert!(run(&cli).unwrap_err().to_string().contains("inputs.checkpoint"));
        assert!(dir.path().join("config.toml").exists());
    }
}
