//! Declarative run configuration with strict parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{DatasetKind, Encoder};
use crate::denoiser::NetConfig;
use crate::error::{Error, Result};
use crate::lora::{LoraSpec, DEFAULT_LAMBDA_ACCEL, DEFAULT_LAMBDA_STYLE};
use crate::metrics::Bandwidth;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::solvers::SolverKind;
use crate::training::{DistillConfig, LrSchedule, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub distribution: DatasetKind,
    /// Training set size.
    pub size: usize,
    /// Reference set size for evaluation.
    pub eval_size: usize,
    pub encoder: Encoder,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            distribution: DatasetKind::ring8(),
            size: 20_000,
            eval_size: 2000,
            encoder: Encoder::Identity,
        }
    }
}

/// Style fine-tuning: the teacher's loss on the base distribution rotated
/// by `angle_deg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleConfig {
    pub angle_deg: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub p_uncond: f64,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for StyleConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            angle_deg: 22.5,
            steps: 5000,
            lr: t.lr,
            batch: t.batch,
            p_uncond: t.p_uncond,
            optimizer: t.optimizer,
            lr_schedule: t.lr_schedule,
            log_every: t.log_every,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

impl StyleConfig {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            p_uncond: self.p_uncond,
            optimizer: self.optimizer,
            lr_schedule: self.lr_schedule,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn distribution(&self, base: &DatasetKind) -> DatasetKind {
        base.clone().rotated(self.angle_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Number of sampler steps `S`.
    pub steps: usize,
    pub omega: f64,
    pub count: usize,
    /// Solver used when sampling a bare teacher.
    pub solver: SolverKind,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            omega: 7.5,
            count: 2000,
            solver: SolverKind::Ddim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CombineConfig {
    /// Weight of the style adapter.
    pub lambda1: f64,
    /// Weight of the acceleration adapter.
    pub lambda2: f64,
}

impl Default for CombineConfig {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA_STYLE,
            lambda2: DEFAULT_LAMBDA_ACCEL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bandwidth: Bandwidth,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub dataset: DataConfig,
    pub teacher: TrainConfig,
    pub style: StyleConfig,
    pub distill: DistillConfig,
    pub lora: LoraSpec,
    pub sample: SampleConfig,
    pub combine: CombineConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates; unknown keys anywhere are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = NoiseSchedule::from_config(&self.schedule)?;
        self.dataset.distribution.validate()?;
        let (dim, classes) = (self.dataset.distribution.dim(), self.dataset.distribution.num_classes());
        if self.net.data_dim != dim {
            return Err(Error::invalid(format!(
                "net.data_dim is {} but the dataset has dimension {dim}",
                self.net.data_dim
            )));
        }
        if self.net.num_classes < classes {
            return Err(Error::invalid(format!(
                "net.num_classes is {} but the dataset has {classes} conditions",
                self.net.num_classes
            )));
        }
        if self.dataset.size == 0 || self.dataset.eval_size < 2 {
            return Err(Error::invalid("dataset.size must be positive and dataset.eval_size at least 2"));
        }
        self.teacher.validate()?;
        self.style.train().validate()?;
        if !self.style.angle_deg.is_finite() {
            return Err(Error::invalid("style.angle_deg must be finite"));
        }
        self.distill.validate(schedule.len())?;
        if self.lora.rank == 0 || !self.lora.scale.is_finite() {
            return Err(Error::invalid("lora.rank must be positive and lora.scale finite"));
        }
        if self.sample.steps == 0 || self.sample.steps > schedule.len() || self.sample.count == 0 {
            return Err(Error::invalid(format!(
                "sample.steps must lie in 1..={} and sample.count must be positive",
                schedule.len()
            )));
        }
        if !(self.sample.omega >= 0.0) || !self.sample.omega.is_finite() {
            return Err(Error::invalid("sample.omega must be a finite non-negative number"));
        }
        if !self.combine.lambda1.is_finite() || !self.combine.lambda2.is_finite() {
            return Err(Error::invalid("combine weights must be finite"));
        }
        if let Bandwidth::Fixed(h) = self.eval.bandwidth {
            if !(h > 0.0) {
                return Err(Error::invalid("eval bandwidth must be positive"));
            }
        }
        Ok(())
    }

    /// Every field, defaults included.
    pub fn effective(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(&self.schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.style.steps, 5000);
        assert_eq!(cfg.combine.lambda1, 0.8);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"teacher": {"stpes": 10}}"#,
            r#"{"schedule": {"N": 50, "beta_min": 1e-4, "beta_max": 0.05, "x": 1}}"#,
            r#"{"distill": {"guidance": {"mode": "fixed", "omega": 2, "w": 1}}}"#,
            r#"{"dataset": {"distribution": {"kind": "ring8", "radius": 2, "sigma": 1}}}"#,
        ] {
            assert!(RunConfig::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "teacher": {"steps": 10}, "sample": {"omega": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.teacher.steps, 10);
        assert_eq!(cfg.teacher.batch, 256);
        assert_eq!(cfg.sample.omega, 2.0);
        assert_eq!(cfg.sample.steps, 4);
    }

    #[test]
    fn effective_round_trips() {
        let cfg = RunConfig::from_json(r#"{"lora": {"rank": 4}, "eval": {"bandwidth": {"fixed": 0.5}}}"#).unwrap();
        let echoed = serde_json::to_string(&cfg.effective()).unwrap();
        assert_eq!(RunConfig::from_json(&echoed).unwrap(), cfg);
        assert!(cfg.effective()["distill"]["skip"].is_number());
    }

    #[test]
    fn semantic_errors() {
        assert!(RunConfig::from_json(r#"{"net": {"data_dim": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sample": {"steps": 51}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"distill": {"skip": 50}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"eval": {"bandwidth": {"fixed": 0}}}"#).is_err());
    }
}
