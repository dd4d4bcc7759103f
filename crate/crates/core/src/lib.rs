//! Diffusion policies for toy continuous control: behavior-cloning
//! pre-training with a dispersive representation regularizer, PPO
//! fine-tuning over the denoising chain, and collapse diagnostics.

pub mod autodiff;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod diffusion;
pub mod dispersive;
pub mod envs;
pub mod error;
pub mod exec;
pub mod finetune;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod policy;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};
