//! Few-step consistency sampling and many-step solver baselines.

use crate::autodiff::Tensor;
use crate::denoiser::{Condition, ConsistencyModel, ALPHA_GUARD};
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::schedule::NoiseSchedule;
use crate::solvers::{cfg_target, EpsModel, SolverKind};

/// Descending inference timesteps `τ_S > … > τ_1`, `τ_i = round(i·N/S)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    taus: Vec<usize>,
}

impl StepSchedule {
    pub fn new(n: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > n {
            return Err(Error::invalid(format!(
                "step count must lie in 1..={n}, got {steps}"
            )));
        }
        let taus = (1..=steps)
            .rev()
            .map(|i| ((i * n) as f64 / steps as f64).round() as usize)
            .collect();
        Ok(Self { taus })
    }

    /// Explicit grid; must start at `N` and strictly descend to `≥ 1`.
    pub fn from_taus(n: usize, taus: Vec<usize>) -> Result<Self> {
        let valid = taus.first() == Some(&n)
            && taus.windows(2).all(|w| w[0] > w[1])
            && taus.last().is_some_and(|&t| t >= 1);
        if !valid {
            return Err(Error::invalid(format!("invalid step schedule {taus:?}")));
        }
        Ok(Self { taus })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }
}

/// Anything usable as a consistency function `f(z, ω, c, τ)`.
pub trait ConsistencyFn {
    fn predict(&self, z: &Tensor, ns: &[usize], omega: &[f64], cond: &[Condition]) -> Result<Tensor>;
}

impl ConsistencyFn for ConsistencyModel<'_> {
    fn predict(&self, z: &Tensor, ns: &[usize], omega: &[f64], cond: &[Condition]) -> Result<Tensor> {
        ConsistencyModel::predict(self, z, ns, omega, cond)
    }
}

fn sample_streams(rng: &Rng, tag: &str, count: usize) -> Vec<Stream> {
    (0..count).map(|i| rng.stream(tag, i as u64)).collect()
}

fn draw_rows(streams: &mut [Stream], dim: usize) -> Result<Tensor> {
    let mut d = Vec::with_capacity(streams.len() * dim);
    for s in streams.iter_mut() {
        d.extend(s.normals(dim));
    }
    Tensor::new(vec![streams.len(), dim], d)
}

fn check_count(cond: &[Condition]) -> Result<usize> {
    if cond.is_empty() {
        return Err(Error::invalid("sample count must be positive"));
    }
    Ok(cond.len())
}

/// Stochastic multistep consistency sampling. One sample per entry of
/// `cond`; sample `i` draws all of its noise from its own stream.
pub fn lcm_multistep_sample(
    model: &dyn ConsistencyFn,
    schedule: &NoiseSchedule,
    steps: &StepSchedule,
    omega: f64,
    cond: &[Condition],
    dim: usize,
    rng: &Rng,
) -> Result<Tensor> {
    let count = check_count(cond)?;
    let taus = steps.taus();
    if taus.first() != Some(&schedule.len()) {
        return Err(Error::invalid("step schedule does not start at N"));
    }
    let mut streams = sample_streams(rng, "lcm-sample", count);
    let omegas = vec![omega; count];
    let mut z = draw_rows(&mut streams, dim)?;
    let mut x0 = z.clone();
    for (i, &tau) in taus.iter().enumerate() {
        x0 = model.predict(&z, &vec![tau; count], &omegas, cond)?;
        if let Some(&next) = taus.get(i + 1) {
            let eps = draw_rows(&mut streams, dim)?;
            z = schedule.add_noise(&x0, next, &eps)?;
        }
    }
    Ok(x0)
}

/// Guided solver baseline: `cfg_target` steps down the grid, then `x̂₀`
/// from the guided ε at `τ_1`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample(
    teacher: &dyn EpsModel,
    schedule: &NoiseSchedule,
    steps: &StepSchedule,
    kind: SolverKind,
    omega: f64,
    cond: &[Condition],
    dim: usize,
    rng: &Rng,
) -> Result<Tensor> {
    let count = check_count(cond)?;
    let taus = steps.taus();
    if taus.first() != Some(&schedule.len()) {
        return Err(Error::invalid("step schedule does not start at N"));
    }
    let mut streams = sample_streams(rng, "solver-sample", count);
    let z = draw_rows(&mut streams, dim)?;
    solve_from(teacher, schedule, taus, kind, omega, cond, z)
}

/// Runs the guided solver from `z` at `taus[0]` and returns `x̂₀` at the last grid point.
pub fn solve_from(
    teacher: &dyn EpsModel,
    schedule: &NoiseSchedule,
    taus: &[usize],
    kind: SolverKind,
    omega: f64,
    cond: &[Condition],
    mut z: Tensor,
) -> Result<Tensor> {
    let count = z.rows();
    let omegas = vec![omega; count];
    for w in taus.windows(2) {
        z = cfg_target(&z, &vec![w[0]; count], &vec![w[1]; count], cond, &omegas, teacher, kind, schedule)?;
    }
    let last = *taus.last().ok_or_else(|| Error::invalid("empty step schedule"))?;
    let p = schedule.point(last)?;
    if p.alpha < ALPHA_GUARD {
        return Err(Error::DegenerateSchedule(p.alpha));
    }
    let at = vec![p; count];
    let eps_c = teacher.eps(&z, &at, cond)?;
    let eps = if omega == 0.0 {
        eps_c
    } else {
        let eps_u = teacher.eps(&z, &at, &vec![Condition::Null; count])?;
        eps_c.zip_map(&eps_u, |c, u| c + omega * (c - u))?
    };
    z.zip_map(&eps, |zv, ev| (zv - p.sigma * ev) / p.alpha)
}

/// Conditions `0, 1, …, classes−1, 0, 1, …` for `count` samples.
pub fn round_robin(count: usize, classes: usize) -> Vec<Condition> {
    (0..count).map(|i| Condition::Class(i % classes.max(1))).collect()
}
