//! The stages of a run wired to one [`RunConfig`] and one seed.
//!
//! Every stage draws from its own derived root, so rerunning a stage alone
//! reproduces what it produced inside a full run.

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::denoiser::{Condition, ConsistencyHead, ConsistencyModel, DenoiserNet};
use crate::error::{Error, Result};
use crate::lora::{combine, AdapterBundle, LoraAdapter, Provenance, Role};
use crate::metrics::mmd2;
use crate::rng::Rng;
use crate::sampling::{ddim_sample, lcm_multistep_sample, round_robin, StepSchedule};
use crate::schedule::NoiseSchedule;
use crate::solvers::{NetEps, SolverKind};
use crate::training::{finetune_style_lora, lcd_distill, train_teacher, TrainObserver, TrainReport};

/// How a sampler request is interpreted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRequest {
    pub steps: usize,
    pub omega: f64,
    pub count: usize,
    /// Seed of the sampling noise, independent of the run seed.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: RunConfig,
    rng: Rng,
    schedule: NoiseSchedule,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.noise_schedule()?;
        let rng = Rng::new(cfg.seed);
        Ok(Self { cfg, rng, schedule })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn training_data(&self) -> Result<Dataset> {
        let d = &self.cfg.dataset;
        d.distribution.sample(d.size, &self.rng.derive("data"))
    }

    pub fn style_data(&self) -> Result<Dataset> {
        let d = &self.cfg.dataset;
        self.cfg
            .style
            .distribution(&d.distribution)
            .sample(d.size, &self.rng.derive("style-data"))
    }

    /// Held-out draw from the base (`styled = false`) or style distribution.
    pub fn reference(&self, styled: bool) -> Result<Tensor> {
        let d = &self.cfg.dataset;
        let set = if styled {
            self.cfg
                .style
                .distribution(&d.distribution)
                .sample(d.eval_size, &self.rng.derive("style-reference"))?
        } else {
            d.distribution.sample(d.eval_size, &self.rng.derive("reference"))?
        };
        Ok(set.points)
    }

    pub fn init_net(&self) -> Result<DenoiserNet> {
        DenoiserNet::new(self.cfg.net.clone(), &mut self.rng.derive("init").stream("net", 0))
    }

    fn fresh_adapter(&self, teacher: &DenoiserNet, tag: &str) -> Result<LoraAdapter> {
        LoraAdapter::attach(teacher, &self.cfg.lora, &mut self.rng.derive(tag).stream("lora", 0))
    }

    pub fn train_teacher(&self, obs: &mut dyn TrainObserver) -> Result<(DenoiserNet, TrainReport)> {
        let data = self.training_data()?;
        train_teacher(
            &data,
            self.init_net()?,
            &self.cfg.dataset.encoder,
            &self.schedule,
            &self.cfg.teacher,
            &self.rng.derive("teacher"),
            obs,
        )
    }

    pub fn distill(&self, teacher: &DenoiserNet, obs: &mut dyn TrainObserver) -> Result<(AdapterBundle, TrainReport)> {
        let data = self.training_data()?;
        lcd_distill(
            teacher,
            self.fresh_adapter(teacher, "lcd-init")?,
            &data,
            &self.cfg.dataset.encoder,
            &self.schedule,
            &self.cfg.distill,
            &self.rng.derive("distill"),
            obs,
        )
    }

    pub fn finetune_style(
        &self,
        teacher: &DenoiserNet,
        obs: &mut dyn TrainObserver,
    ) -> Result<(AdapterBundle, TrainReport)> {
        let data = self.style_data()?;
        finetune_style_lora(
            teacher,
            self.fresh_adapter(teacher, "style-init")?,
            &data,
            &self.cfg.dataset.encoder,
            &self.schedule,
            &self.cfg.style.train(),
            &self.rng.derive("style"),
            obs,
        )
    }

    /// Weighted sum with the configured `λ₁` (style) and `λ₂` (acceleration).
    pub fn combine(&self, style: &AdapterBundle, accel: &AdapterBundle) -> Result<AdapterBundle> {
        let c = self.cfg.combine;
        let mut out = combine(style, accel, c.lambda1, c.lambda2)?;
        out.provenance = Some(Provenance {
            lambda_style: c.lambda1,
            lambda_accel: c.lambda2,
            style_source: style.name.clone(),
            accel_source: accel.name.clone(),
        });
        Ok(out)
    }

    pub fn default_request(&self, seed: u64) -> SampleRequest {
        let s = &self.cfg.sample;
        SampleRequest {
            steps: s.steps,
            omega: s.omega,
            count: s.count,
            seed,
        }
    }

    /// Draws samples in data space with round-robin conditions.
    ///
    /// Without an adapter, or with a style adapter, the guided solver runs
    /// on the (adapted) teacher. Acceleration and combined adapters use
    /// multistep consistency sampling.
    pub fn sample(
        &self,
        teacher: &DenoiserNet,
        adapter: Option<&AdapterBundle>,
        req: &SampleRequest,
    ) -> Result<(Tensor, Vec<Condition>)> {
        if req.count == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        let steps = StepSchedule::new(self.schedule.len(), req.steps)?;
        let cond = round_robin(req.count, self.cfg.dataset.distribution.num_classes());
        let dim = teacher.config().data_dim;
        let rng = Rng::new(req.seed);
        let latents = match adapter {
            Some(b) if b.role != Role::Style => {
                b.adapter.check_compatible(teacher)?;
                let model = ConsistencyModel {
                    net: teacher,
                    adapter: Some(&b.adapter),
                    head: ConsistencyHead::new(&self.schedule),
                    schedule: &self.schedule,
                };
                lcm_multistep_sample(&model, &self.schedule, &steps, req.omega, &cond, dim, &rng)?
            }
            other => {
                let adapter = match other {
                    Some(b) => {
                        b.adapter.check_compatible(teacher)?;
                        Some(&b.adapter)
                    }
                    None => None,
                };
                let eps = NetEps { net: teacher, adapter, omega: 0.0 };
                let kind: SolverKind = self.cfg.sample.solver;
                ddim_sample(&eps, &self.schedule, &steps, kind, req.omega, &cond, dim, &rng)?
            }
        };
        Ok((self.cfg.dataset.encoder.decode(&latents)?, cond))
    }

    /// MMD² between `samples` and `reference` with the configured bandwidth.
    pub fn mmd(&self, samples: &Tensor, reference: &Tensor) -> Result<f64> {
        mmd2(samples, reference, self.cfg.eval.bandwidth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Silent;

    fn tiny() -> RunConfig {
        RunConfig::from_json(
            r#"{
                "seed": 3,
                "net": {"hidden": [16, 16]},
                "dataset": {"size": 64, "eval_size": 32},
                "teacher": {"steps": 20, "batch": 16, "log_every": 5},
                "style": {"steps": 10, "batch": 16, "log_every": 5},
                "distill": {"steps": 10, "batch": 16, "log_every": 5},
                "lora": {"rank": 2},
                "sample": {"count": 24}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn stages_are_reproducible() {
        let p = Pipeline::new(tiny()).unwrap();
        let (t1, r1) = p.train_teacher(&mut Silent).unwrap();
        let (t2, r2) = p.train_teacher(&mut Silent).unwrap();
        assert_eq!(t1.params(), t2.params());
        assert_eq!(r1.losses, r2.losses);
        let (a1, _) = p.distill(&t1, &mut Silent).unwrap();
        let (a2, _) = p.distill(&t1, &mut Silent).unwrap();
        assert_eq!(a1.adapter, a2.adapter);
    }

    #[test]
    fn sampling_routes_by_role() {
        let p = Pipeline::new(tiny()).unwrap();
        let (t, _) = p.train_teacher(&mut Silent).unwrap();
        let (accel, _) = p.distill(&t, &mut Silent).unwrap();
        let (style, _) = p.finetune_style(&t, &mut Silent).unwrap();
        let comb = p.combine(&style, &accel).unwrap();
        assert_eq!(comb.role, Role::Combined);
        assert_eq!(comb.provenance.as_ref().unwrap().lambda_style, 0.8);
        let req = p.default_request(11);
        for b in [None, Some(&accel), Some(&style), Some(&comb)] {
            let (x, c) = p.sample(&t, b, &req).unwrap();
            assert_eq!(x.shape(), &[24, 2]);
            assert_eq!(c.len(), 24);
            assert!(x.data().iter().all(|v| v.is_finite()));
        }
        let (x1, _) = p.sample(&t, Some(&accel), &req).unwrap();
        let (x2, _) = p.sample(&t, Some(&accel), &req).unwrap();
        assert_eq!(x1, x2);
    }

    #[test]
    fn references_differ_between_distributions() {
        let p = Pipeline::new(tiny()).unwrap();
        assert_ne!(p.reference(false).unwrap(), p.reference(true).unwrap());
        assert_eq!(p.reference(true).unwrap(), p.reference(true).unwrap());
    }
}
