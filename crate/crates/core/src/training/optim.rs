//! Parameter updates: plain SGD, Adam, and the EMA shadow.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `θ ← θ − η·∇`.
    Sgd,
    #[default]
    Adam,
}

/// Learning-rate profile over a run of `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 1-based `step` of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine if total <= 1 => 1.0,
            Self::Cosine => {
                let p = (step.saturating_sub(1)) as f64 / total as f64;
                0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Named-parameter optimizer. Call [`Optimizer::begin_step`] once per
/// step, then [`Optimizer::update`] for each parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        param.same_shape("optimizer update", grad)?;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.t.max(1) as i32;
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                    *p -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        if !param.all_finite() {
            return Err(Error::NonFinite("optimizer update"));
        }
        Ok(())
    }
}

/// Slowly moving copy `θ⁻` of the trainable adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    pub adapter: LoraAdapter,
}

impl EmaShadow {
    /// `θ⁻ ← θ`.
    pub fn new(theta: &LoraAdapter) -> Self {
        Self {
            adapter: theta.clone(),
        }
    }
}

fn blend(shadow: &mut Tensor, theta: &Tensor, mu: f64) -> Result<()> {
    shadow.same_shape("ema_update", theta)?;
    for (s, &t) in shadow.data_mut().iter_mut().zip(theta.data()) {
        *s = mu * *s + (1.0 - mu) * t;
    }
    Ok(())
}

/// `θ⁻ ← μ·θ⁻ + (1 − μ)·θ`, outside any tape.
pub fn ema_update(shadow: &mut EmaShadow, theta: &LoraAdapter, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid(format!("EMA rate must lie in [0, 1], got {mu}")));
    }
    let same_layers = shadow.adapter.entries().len() == theta.entries().len()
        && shadow
            .adapter
            .entries()
            .keys()
            .zip(theta.entries().keys())
            .all(|(a, b)| a == b);
    if !same_layers {
        return Err(Error::invalid("EMA shadow and parameters cover different layers"));
    }
    for ((_, s), t) in shadow.adapter.entries_mut().zip(theta.entries().values()) {
        blend(&mut s.a, &t.a, mu)?;
        blend(&mut s.b, &t.b, mu)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraEntry;

    fn adapter(v: f64) -> LoraAdapter {
        let e = LoraEntry {
            a: Tensor::full(&[1, 2], v),
            b: Tensor::full(&[3, 1], v),
            scale: 1.0,
        };
        LoraAdapter::from_entries("fp", BTreeMap::from([("layer0.weight".to_string(), e)])).unwrap()
    }

    #[test]
    fn ema_edge_cases() {
        let theta = adapter(4.0);
        let mut s = EmaShadow::new(&adapter(2.0));
        ema_update(&mut s, &theta, 1.0).unwrap();
        assert_eq!(s.adapter, adapter(2.0));
        ema_update(&mut s, &theta, 0.5).unwrap();
        assert_eq!(s.adapter, adapter(3.0));
        ema_update(&mut s, &theta, 0.0).unwrap();
        assert_eq!(s.adapter, theta);
        assert!(ema_update(&mut s, &theta, 1.5).is_err());
        assert!(ema_update(&mut s, &theta, -0.1).is_err());
    }

    #[test]
    fn cosine_profile() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.factor(1, 100), 1.0);
        assert!((c.factor(51, 100) - 0.5).abs() < 1e-12);
        assert!(c.factor(100, 100) > 0.0 && c.factor(100, 100) < 1e-3);
        assert_eq!(LrSchedule::Constant.factor(70, 100), 1.0);
    }

    #[test]
    fn sgd_step() {
        let mut o = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut p = Tensor::full(&[2], 1.0);
        o.begin_step();
        o.update("p", &mut p, &Tensor::full(&[2], 2.0)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut o = Optimizer::new(OptimizerKind::Adam, 0.01).unwrap();
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        o.begin_step();
        o.update("p", &mut p, &Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-8);
        assert!((p.data()[1] + 0.99).abs() < 1e-8);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut o = Optimizer::new(OptimizerKind::Adam, 0.05).unwrap();
        let mut p = Tensor::new(vec![2], vec![3.0, -2.0]).unwrap();
        for _ in 0..2000 {
            o.begin_step();
            let g = p.scale(2.0);
            o.update("p", &mut p, &g).unwrap();
        }
        assert!(p.frobenius_norm() < 1e-2);
    }
}
