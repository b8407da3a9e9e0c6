//! Latent consistency distillation with adapter-only trainable parameters.

use serde::{Deserialize, Serialize};

use super::optim::{ema_update, EmaShadow, LrSchedule, Optimizer, OptimizerKind};
use super::{snapshot_due, step_adapter, Recorder, Snapshot, TrainObserver, TrainReport};
use crate::autodiff::{grad_check, GradCheckReport, NodeId, Tape, Tensor};
use crate::data::{Dataset, DatasetKind, Encoder};
use crate::denoiser::{consistency_graph, Condition, ConsistencyHead, DenoiserNet, NetConfig, ParamNodes};
use crate::error::{Error, Result};
use crate::lora::{AdapterBundle, LoraAdapter, LoraNode, LoraNodes, LoraSpec, Role};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::solvers::{cfg_target, NetEps, SolverKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum GuidanceMode {
    Fixed { omega: f64 },
    Range { min: f64, max: f64 },
}

impl Default for GuidanceMode {
    fn default() -> Self {
        Self::Fixed { omega: 7.5 }
    }
}

impl GuidanceMode {
    pub const DEFAULT_RANGE: (f64, f64) = (2.0, 14.0);

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Self::Fixed { omega } => (omega, omega),
            Self::Range { min, max } => (min, max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Distance {
    /// `‖a − b‖²`.
    #[default]
    L2,
    /// `sqrt(‖a − b‖² + c²) − c`.
    PseudoHuber { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lr: f64,
    /// EMA rate μ of the target branch.
    pub ema: f64,
    /// Skipping interval k.
    pub skip: usize,
    pub guidance: GuidanceMode,
    pub distance: Distance,
    pub solver: SolverKind,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            ema: 0.95,
            skip: 5,
            guidance: GuidanceMode::default(),
            distance: Distance::L2,
            solver: SolverKind::Ddim,
            steps: 10_000,
            batch: 256,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Cosine,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        if self.skip < 1 || self.skip >= schedule_len {
            return Err(Error::invalid(format!(
                "skipping interval must lie in 1..={}, got {}",
                schedule_len.saturating_sub(1),
                self.skip
            )));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::invalid(format!("EMA rate must lie in [0, 1], got {}", self.ema)));
        }
        let (lo, hi) = self.guidance.bounds();
        if !(lo >= 0.0) || !(lo <= hi) || !hi.is_finite() {
            return Err(Error::invalid(format!("invalid guidance interval [{lo}, {hi}]")));
        }
        if let Distance::PseudoHuber { c } = self.distance {
            if !(c > 0.0) {
                return Err(Error::invalid("pseudo-Huber constant must be positive"));
            }
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.log_every == 0 {
            return Err(Error::invalid("learning rate, batch and log_every must be positive"));
        }
        Ok(())
    }
}

/// Random choices for one distillation step.
#[derive(Debug, Clone, PartialEq)]
pub struct LcdDraw {
    pub idx: Vec<usize>,
    /// Lower index `n ~ U{1..N−k}`; the noisy point sits at `n + k`.
    pub n: Vec<usize>,
    pub omega: Vec<f64>,
    pub noise: Tensor,
}

pub fn draw_lcd_batch(
    cfg: &DistillConfig,
    data_len: usize,
    dim: usize,
    schedule: &NoiseSchedule,
    rng: &Rng,
    step: usize,
) -> Result<LcdDraw> {
    cfg.validate(schedule.len())?;
    if data_len == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut s = rng.stream("lcd-step", step as u64);
    let (lo, hi) = cfg.guidance.bounds();
    let mut idx = Vec::with_capacity(cfg.batch);
    let mut n = Vec::with_capacity(cfg.batch);
    let mut omega = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        idx.push(s.int_inclusive(0, data_len - 1));
        n.push(s.int_inclusive(1, schedule.len() - cfg.skip));
        omega.push(if lo == hi { lo } else { s.uniform_range(lo, hi) });
    }
    let noise = Tensor::new(vec![cfg.batch, dim], s.normals(cfg.batch * dim))?;
    Ok(LcdDraw { idx, n, omega, noise })
}

/// Inputs of one consistency loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LcdBatch {
    /// `z_{n+k}` from the forward process.
    pub z_hi: Tensor,
    pub n_hi: Vec<usize>,
    /// Guided solver target `ẑ_n`.
    pub target_in: Tensor,
    pub n_lo: Vec<usize>,
    pub omega: Vec<f64>,
    pub cond: Vec<Condition>,
}

/// Noises the drawn latents to `t_{n+k}` and runs the frozen teacher's
/// guided solver down to `t_n`.
pub fn prepare_lcd_batch(
    teacher: &DenoiserNet,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
    latents: &Dataset,
    draw: &LcdDraw,
) -> Result<LcdBatch> {
    let rows: Vec<&[f64]> = draw.idx.iter().map(|&i| latents.points.row(i)).collect();
    let x0 = Tensor::stack_rows(&rows)?;
    let cond: Vec<Condition> = draw.idx.iter().map(|&i| Condition::Class(latents.cond[i])).collect();
    let n_hi: Vec<usize> = draw.n.iter().map(|n| n + cfg.skip).collect();
    let z_hi = schedule.add_noise_rows(&x0, &n_hi, &draw.noise)?;
    let target_in = cfg_target(
        &z_hi,
        &n_hi,
        &draw.n,
        &cond,
        &draw.omega,
        &NetEps::teacher(teacher),
        cfg.solver,
        schedule,
    )?;
    Ok(LcdBatch {
        z_hi,
        n_hi,
        target_in,
        n_lo: draw.n.clone(),
        omega: draw.omega.clone(),
        cond,
    })
}

fn distance_graph(tape: &mut Tape, a: NodeId, b: NodeId, d: Distance) -> Result<NodeId> {
    let rows = tape.value(a).rows() as f64;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    let per_row = match d {
        Distance::L2 => sq,
        Distance::PseudoHuber { c } => {
            let ss = tape.row_sum(sq)?;
            let shifted = tape.add_scalar(ss, c * c)?;
            let root = tape.sqrt(shifted)?;
            tape.add_scalar(root, -c)?
        }
    };
    let total = tape.sum(per_row)?;
    tape.scale(total, 1.0 / rows)
}

/// Records `d(f_θ(z_{n+k}), stopgrad f_θ⁻(ẑ_n))` averaged over rows.
///
/// Both branches share the frozen base `params`; `student` and `target`
/// carry the online and EMA adapter factors.
#[allow(clippy::too_many_arguments)]
pub fn lcd_loss_graph(
    tape: &mut Tape,
    teacher: &DenoiserNet,
    params: &ParamNodes,
    head: &ConsistencyHead,
    schedule: &NoiseSchedule,
    student: &LoraNodes,
    target: &LoraNodes,
    batch: &LcdBatch,
    distance: Distance,
) -> Result<NodeId> {
    let z_hi = tape.constant(batch.z_hi.clone());
    let online = consistency_graph(
        teacher,
        head,
        schedule,
        tape,
        params,
        Some(student),
        z_hi,
        &batch.n_hi,
        &batch.omega,
        &batch.cond,
    )?;
    let z_lo = tape.constant(batch.target_in.clone());
    let ema = consistency_graph(
        teacher,
        head,
        schedule,
        tape,
        params,
        Some(target),
        z_lo,
        &batch.n_lo,
        &batch.omega,
        &batch.cond,
    )?;
    let ema = tape.stop_grad(ema);
    distance_graph(tape, online, ema, distance)
}

/// Central-difference check of the consistency loss gradient with respect
/// to every factor of `adapter`. The target branch uses `target`.
#[allow(clippy::too_many_arguments)]
pub fn lcd_grad_check(
    teacher: &DenoiserNet,
    adapter: &LoraAdapter,
    target: &LoraAdapter,
    schedule: &NoiseSchedule,
    batch: &LcdBatch,
    distance: Distance,
    h: f64,
) -> Result<GradCheckReport> {
    let head = ConsistencyHead::new(schedule);
    let layers: Vec<(String, f64)> = adapter.entries().iter().map(|(k, e)| (k.clone(), e.scale)).collect();
    let mut flat = Vec::with_capacity(2 * layers.len());
    for e in adapter.entries().values() {
        flat.push(e.a.clone());
        flat.push(e.b.clone());
    }
    grad_check(&flat, h, |tape, ids| {
        let params = teacher.bind(tape, false);
        let student = LoraNodes::from_pairs(layers.iter().enumerate().map(|(i, (name, scale))| {
            (
                name.clone(),
                LoraNode {
                    a: ids[2 * i],
                    b: ids[2 * i + 1],
                    scale: *scale,
                },
            )
        }));
        let target = target.bind(tape, false);
        lcd_loss_graph(tape, teacher, &params, &head, schedule, &student, &target, batch, distance)
    })
}

/// Gradient check on a freshly initialised `2-hidden-2` denoiser whose
/// output layer and adapter `B` factors are randomised, so no gradient is
/// trivially zero. The target adapter is an independent perturbation.
pub fn lcd_grad_check_random(hidden: &[usize], rank: usize, batch: usize, seed: u64, h: f64) -> Result<GradCheckReport> {
    let rng = Rng::new(seed);
    let net_cfg = NetConfig {
        hidden: hidden.to_vec(),
        ..NetConfig::default()
    };
    let mut net = DenoiserNet::new(net_cfg, &mut rng.stream("gc-init", 0))?;
    let mut s = rng.stream("gc-perturb", 0);
    let last = format!("layer{}.weight", hidden.len());
    for v in net.param_mut(&last)?.data_mut() {
        *v = 0.3 * s.normal();
    }
    let spec = LoraSpec {
        rank,
        ..LoraSpec::default()
    };
    let mut adapter = LoraAdapter::attach(&net, &spec, &mut s)?;
    for (_, e) in adapter.entries_mut() {
        for v in e.b.data_mut() {
            *v = 0.1 * s.normal();
        }
    }
    let mut target = adapter.clone();
    for (_, e) in target.entries_mut() {
        for v in e.b.data_mut() {
            *v += 0.05 * s.normal();
        }
    }
    let schedule = NoiseSchedule::from_config(&ScheduleConfig::default())?;
    let kind = DatasetKind::ring8();
    let data = kind.sample(batch.max(8), &rng)?;
    let cfg = DistillConfig {
        batch,
        guidance: GuidanceMode::Range {
            min: GuidanceMode::DEFAULT_RANGE.0,
            max: GuidanceMode::DEFAULT_RANGE.1,
        },
        ..DistillConfig::default()
    };
    let draw = draw_lcd_batch(&cfg, data.len(), data.dim(), &schedule, &rng, 0)?;
    let b = prepare_lcd_batch(&net, &schedule, &cfg, &data, &draw)?;
    lcd_grad_check(&net, &adapter, &target, &schedule, &b, cfg.distance, h)
}

/// Distils the teacher's guided PF-ODE into adapter factors. Returns the
/// online adapter as the acceleration bundle; the teacher is never written.
#[allow(clippy::too_many_arguments)]
pub fn lcd_distill(
    teacher: &DenoiserNet,
    mut adapter: LoraAdapter,
    data: &Dataset,
    encoder: &Encoder,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
    rng: &Rng,
    obs: &mut dyn TrainObserver,
) -> Result<(AdapterBundle, TrainReport)> {
    cfg.validate(schedule.len())?;
    adapter.check_compatible(teacher)?;
    let latents = encoder.encode_dataset(data)?;
    if latents.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let head = ConsistencyHead::new(schedule);
    let mut shadow = EmaShadow::new(&adapter);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut rec = Recorder::new(cfg.log_every);
    for step in 1..=cfg.steps {
        let draw = draw_lcd_batch(cfg, latents.len(), latents.dim(), schedule, rng, step)?;
        let batch = prepare_lcd_batch(teacher, schedule, cfg, &latents, &draw)?;
        let mut tape = Tape::new();
        let params = teacher.bind(&mut tape, false);
        let student = adapter.bind(&mut tape, true);
        let target = shadow.adapter.bind(&mut tape, false);
        let loss = lcd_loss_graph(&mut tape, teacher, &params, &head, schedule, &student, &target, &batch, cfg.distance)?;
        rec.record(step, cfg.steps, tape.value(loss).item(), obs)?;
        let grads = tape.backward(loss)?;
        opt.set_lr(cfg.lr * cfg.lr_schedule.factor(step, cfg.steps));
        step_adapter(&mut opt, &mut adapter, &student, &grads)?;
        ema_update(&mut shadow, &adapter, cfg.ema)?;
        if snapshot_due(step, cfg.checkpoint_every) {
            obs.on_snapshot(step, Snapshot::Adapter(&adapter))?;
        }
    }
    Ok((
        AdapterBundle::new(adapter, Role::Acceleration, "acceleration"),
        rec.finish(),
    ))
}
