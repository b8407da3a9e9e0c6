//! LoRA-based latent consistency distillation on small diffusion models.
//!
//! The crate trains a class-conditional ε-prediction teacher on toy 2-D
//! data, distills it into a few-step consistency model by training only
//! low-rank adapter factors, and combines the resulting acceleration
//! adapter with independently trained style adapters by weight arithmetic.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod data;
pub mod lora;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod solvers;
pub mod training;

pub use autodiff::{grad_check, GradCheckReport, NodeId, Tape, Tensor};
pub use denoiser::{Condition, ConsistencyHead, ConsistencyModel, DenoiserNet, Inputs, NetConfig};
pub use error::{Error, Result};
pub use lora::{combine, merge, AdapterBundle, LoraAdapter, LoraSpec, Role};
pub use rng::Rng;
pub use schedule::{NoiseSchedule, ScheduleConfig, TimePoint};
pub use solvers::{cfg_target, oracle_flow, EpsModel, GaussianOracle, NetEps, SolverKind};
pub use data::{Dataset, DatasetKind, Encoder};
pub use metrics::{mmd2, moments_error, Bandwidth};
pub use sampling::{ddim_sample, lcm_multistep_sample, ConsistencyFn, StepSchedule};
pub use training::{
    ema_update, finetune_style_lora, lcd_distill, train_teacher, DistillConfig, EmaShadow,
    LrSchedule, TrainConfig, TrainReport,
};
pub use config::RunConfig;
pub use pipeline::{Pipeline, SampleRequest};
pub use checkpoint::{load_adapter, load_checkpoint, load_net, save_adapter, save_checkpoint, save_net};
