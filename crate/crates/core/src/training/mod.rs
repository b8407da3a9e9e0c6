//! Teacher training, style adapter fine-tuning, and latent consistency
//! distillation.

mod lcd;
mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use lcd::{
    draw_lcd_batch, lcd_distill, lcd_grad_check, lcd_grad_check_random, lcd_loss_graph, prepare_lcd_batch, DistillConfig, Distance,
    GuidanceMode, LcdBatch, LcdDraw,
};
pub use optim::{ema_update, EmaShadow, LrSchedule, Optimizer, OptimizerKind};

use crate::autodiff::{Tape, Tensor};
use crate::data::{Dataset, Encoder};
use crate::denoiser::{Condition, DenoiserNet, Inputs};
use crate::error::{Error, Result};
use crate::lora::{AdapterBundle, LoraAdapter, LoraNodes, Role};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;

/// Options for ε-prediction training, used for both the teacher and
/// style adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Probability of replacing the condition with ∅.
    pub p_uncond: f64,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub log_every: usize,
    /// Snapshot interval in steps; 0 disables snapshots.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1e-3,
            batch: 256,
            p_uncond: 0.1,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Cosine,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::invalid(format!("p_uncond must lie in [0, 1), got {}", self.p_uncond)));
        }
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::invalid("batch and log_every must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    /// Exponentially smoothed loss (rate [`LOSS_SMOOTHING`]).
    pub ema_loss: f64,
    pub wall_ms: u64,
}

pub const LOSS_SMOOTHING: f64 = 0.99;

/// Metrics rows plus the raw per-step losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,ema_loss,wall_ms\n");
        for r in &self.rows {
            // `{:?}` prints the shortest string that round-trips exactly.
            let _ = writeln!(s, "{},{:?},{:?},{}", r.step, r.loss, r.ema_loss, r.wall_ms);
        }
        s
    }

    /// Parses the output of [`TrainReport::to_csv`] back into rows.
    pub fn rows_from_csv(csv: &str) -> Result<Vec<MetricsRow>> {
        let mut lines = csv.lines();
        if lines.next() != Some("step,loss,ema_loss,wall_ms") {
            return Err(Error::Corrupted("metrics CSV header".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || Error::Corrupted(format!("metrics CSV line `{l}`"));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(MetricsRow {
                    step: f[0].parse().map_err(|_| bad())?,
                    loss: f[1].parse().map_err(|_| bad())?,
                    ema_loss: f[2].parse().map_err(|_| bad())?,
                    wall_ms: f[3].parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }

    /// Trailing moving average of the raw losses ending at `step` (1-based).
    pub fn moving_average(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.losses.len() || window == 0 {
            return None;
        }
        let lo = step.saturating_sub(window);
        let w = &self.losses[lo..step];
        Some(w.iter().sum::<f64>() / w.len() as f64)
    }
}

/// What a snapshot hook receives.
#[derive(Debug, Clone, Copy)]
pub enum Snapshot<'a> {
    Net(&'a DenoiserNet),
    Adapter(&'a LoraAdapter),
}

/// Receives metrics rows and periodic snapshots during training.
pub trait TrainObserver {
    fn on_metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    fn on_snapshot(&mut self, _step: usize, _snapshot: Snapshot<'_>) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct Silent;

impl TrainObserver for Silent {}

pub(crate) struct Recorder {
    start: Instant,
    smoothed: Option<f64>,
    log_every: usize,
    report: TrainReport,
}

impl Recorder {
    pub(crate) fn new(log_every: usize) -> Self {
        Self {
            start: Instant::now(),
            smoothed: None,
            log_every,
            report: TrainReport::default(),
        }
    }

    pub(crate) fn record(
        &mut self,
        step: usize,
        total: usize,
        loss: f64,
        obs: &mut dyn TrainObserver,
    ) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let s = match self.smoothed {
            None => loss,
            Some(prev) => LOSS_SMOOTHING * prev + (1.0 - LOSS_SMOOTHING) * loss,
        };
        self.smoothed = Some(s);
        self.report.losses.push(loss);
        if step.is_multiple_of(self.log_every) || step == total {
            let row = MetricsRow {
                step,
                loss,
                ema_loss: s,
                wall_ms: self.start.elapsed().as_millis() as u64,
            };
            obs.on_metrics(&row)?;
            self.report.rows.push(row);
        }
        Ok(())
    }

    pub(crate) fn finish(self) -> TrainReport {
        self.report
    }
}

pub(crate) fn snapshot_due(step: usize, every: usize) -> bool {
    every > 0 && step.is_multiple_of(every)
}

/// One sampled diffusion-training batch.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub z: Tensor,
    pub eps: Tensor,
    pub ns: Vec<usize>,
    pub cond: Vec<Condition>,
}

/// Draws `batch` rows: data index, `n ~ U{1..N}`, ε, and ∅-dropout.
pub fn draw_diffusion_batch(
    latents: &Dataset,
    schedule: &NoiseSchedule,
    batch: usize,
    p_uncond: f64,
    rng: &Rng,
    tag: &str,
    step: usize,
) -> Result<DiffusionBatch> {
    if latents.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut s = rng.stream(tag, step as u64);
    let dim = latents.dim();
    let mut x0 = Vec::with_capacity(batch * dim);
    let mut ns = Vec::with_capacity(batch);
    let mut cond = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = s.int_inclusive(0, latents.len() - 1);
        x0.extend_from_slice(latents.points.row(i));
        ns.push(s.int_inclusive(1, schedule.len()));
        cond.push(if s.uniform() < p_uncond {
            Condition::Null
        } else {
            Condition::Class(latents.cond[i])
        });
    }
    let eps = Tensor::new(vec![batch, dim], s.normals(batch * dim))?;
    let x0 = Tensor::new(vec![batch, dim], x0)?;
    let z = schedule.add_noise_rows(&x0, &ns, &eps)?;
    Ok(DiffusionBatch { z, eps, ns, cond })
}

fn mse_graph(tape: &mut Tape, pred: crate::NodeId, target: &Tensor) -> Result<crate::NodeId> {
    let n = target.len() as f64;
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / n)
}

/// Mean squared ε error of `net` (optionally adapted) on `batch`, ω = 0.
pub fn diffusion_loss(
    net: &DenoiserNet,
    adapter: Option<&LoraAdapter>,
    schedule: &NoiseSchedule,
    batch: &DiffusionBatch,
) -> Result<f64> {
    let t: Vec<f64> = batch.ns.iter().map(|&n| schedule.t(n)).collect::<Result<_>>()?;
    let omega = vec![0.0; batch.ns.len()];
    let pred = net.forward_eps(adapter, &batch.z, Inputs { t: &t, omega: &omega, cond: &batch.cond })?;
    let d = pred.sub(&batch.eps)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
}

/// Trains a class-conditional ε-prediction teacher with condition dropout.
/// The guidance input is always fed ω = 0.
pub fn train_teacher(
    data: &Dataset,
    mut net: DenoiserNet,
    encoder: &Encoder,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &Rng,
    obs: &mut dyn TrainObserver,
) -> Result<(DenoiserNet, TrainReport)> {
    cfg.validate()?;
    let latents = encoder.encode_dataset(data)?;
    if latents.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut rec = Recorder::new(cfg.log_every);
    for step in 1..=cfg.steps {
        let batch = draw_diffusion_batch(&latents, schedule, cfg.batch, cfg.p_uncond, rng, "teacher-step", step)?;
        let mut tape = Tape::new();
        let params = net.bind(&mut tape, true);
        let loss = eps_loss_graph(&net, &mut tape, &params, None, schedule, &batch)?;
        let value = tape.value(loss).item();
        rec.record(step, cfg.steps, value, obs)?;
        let grads = tape.backward(loss)?;
        opt.set_lr(cfg.lr * cfg.lr_schedule.factor(step, cfg.steps));
        opt.begin_step();
        let updates: Vec<(String, Tensor)> = params
            .iter()
            .map(|(name, &id)| (name.clone(), grads.get_or_zeros(id)))
            .collect();
        for (name, g) in updates {
            opt.update(&name, net.param_mut(&name)?, &g)?;
        }
        if snapshot_due(step, cfg.checkpoint_every) {
            obs.on_snapshot(step, Snapshot::Net(&net))?;
        }
    }
    Ok((net, rec.finish()))
}

fn eps_loss_graph(
    net: &DenoiserNet,
    tape: &mut Tape,
    params: &crate::denoiser::ParamNodes,
    lora: Option<&LoraNodes>,
    schedule: &NoiseSchedule,
    batch: &DiffusionBatch,
) -> Result<crate::NodeId> {
    let t: Vec<f64> = batch.ns.iter().map(|&n| schedule.t(n)).collect::<Result<_>>()?;
    let omega = vec![0.0; batch.ns.len()];
    let z = tape.constant(batch.z.clone());
    let pred = net.eps_graph(tape, params, lora, z, Inputs { t: &t, omega: &omega, cond: &batch.cond })?;
    mse_graph(tape, pred, &batch.eps)
}

/// Applies one optimizer step to every adapter factor from tape gradients.
pub(crate) fn step_adapter(
    opt: &mut Optimizer,
    adapter: &mut LoraAdapter,
    nodes: &LoraNodes,
    grads: &crate::autodiff::Gradients,
) -> Result<()> {
    opt.begin_step();
    for (layer, entry) in adapter.entries_mut() {
        let node = nodes
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.clone()))?;
        opt.update(&format!("{layer}.a"), &mut entry.a, &grads.get_or_zeros(node.a))?;
        opt.update(&format!("{layer}.b"), &mut entry.b, &grads.get_or_zeros(node.b))?;
    }
    Ok(())
}

/// Fine-tunes a fresh adapter on a style dataset with the teacher's loss,
/// base weights frozen.
#[allow(clippy::too_many_arguments)]
pub fn finetune_style_lora(
    teacher: &DenoiserNet,
    mut adapter: LoraAdapter,
    data: &Dataset,
    encoder: &Encoder,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &Rng,
    obs: &mut dyn TrainObserver,
) -> Result<(AdapterBundle, TrainReport)> {
    cfg.validate()?;
    adapter.check_compatible(teacher)?;
    let latents = encoder.encode_dataset(data)?;
    if latents.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut rec = Recorder::new(cfg.log_every);
    for step in 1..=cfg.steps {
        let batch = draw_diffusion_batch(&latents, schedule, cfg.batch, cfg.p_uncond, rng, "style-step", step)?;
        let mut tape = Tape::new();
        let params = teacher.bind(&mut tape, false);
        let nodes = adapter.bind(&mut tape, true);
        let loss = eps_loss_graph(teacher, &mut tape, &params, Some(&nodes), schedule, &batch)?;
        rec.record(step, cfg.steps, tape.value(loss).item(), obs)?;
        let grads = tape.backward(loss)?;
        opt.set_lr(cfg.lr * cfg.lr_schedule.factor(step, cfg.steps));
        step_adapter(&mut opt, &mut adapter, &nodes, &grads)?;
        if snapshot_due(step, cfg.checkpoint_every) {
            obs.on_snapshot(step, Snapshot::Adapter(&adapter))?;
        }
    }
    Ok((AdapterBundle::new(adapter, Role::Style, "style"), rec.finish()))
}
