//! PF-ODE solvers Ψ, the guided distillation target, and a closed-form
//! Gaussian oracle to validate them.
//!
//! Solvers return an *increment*: `z + Ψ(z, n_hi, n_lo, c)` approximates
//! the ODE solution at `t_lo`. Every row of a batch carries its own pair
//! of timestep indices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::denoiser::{Condition, DenoiserNet, Inputs, ALPHA_GUARD};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::schedule::{NoiseSchedule, TimePoint};

/// Anything that predicts ε at a set of (possibly off-grid) time points.
pub trait EpsModel {
    fn eps(&self, z: &Tensor, at: &[TimePoint], cond: &[Condition]) -> Result<Tensor>;
}

/// ε from a (possibly adapted) network, with a fixed value fed to its
/// guidance embedding. Teachers use 0.
#[derive(Debug, Clone, Copy)]
pub struct NetEps<'a> {
    pub net: &'a DenoiserNet,
    pub adapter: Option<&'a LoraAdapter>,
    pub omega: f64,
}

impl<'a> NetEps<'a> {
    pub fn teacher(net: &'a DenoiserNet) -> Self {
        Self {
            net,
            adapter: None,
            omega: 0.0,
        }
    }
}

impl EpsModel for NetEps<'_> {
    fn eps(&self, z: &Tensor, at: &[TimePoint], cond: &[Condition]) -> Result<Tensor> {
        let t: Vec<f64> = at.iter().map(|p| p.t).collect();
        let omega = vec![self.omega; at.len()];
        self.net.forward_eps(
            self.adapter,
            z,
            Inputs {
                t: &t,
                omega: &omega,
                cond,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Ddim,
    Dpm2,
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "dpm2" => Ok(Self::Dpm2),
            other => Err(Error::invalid(format!(
                "unknown solver `{other}` (expected ddim or dpm2)"
            ))),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ddim => "ddim",
            Self::Dpm2 => "dpm2",
        })
    }
}

fn points(s: &NoiseSchedule, ns: &[usize]) -> Result<Vec<TimePoint>> {
    ns.iter().map(|&n| s.point(n)).collect()
}

fn check_rows(z: &Tensor, hi: &[usize], lo: &[usize]) -> Result<()> {
    if hi.len() != z.rows() || lo.len() != z.rows() {
        return Err(Error::invalid("one (n_hi, n_lo) pair per row required"));
    }
    if hi.iter().zip(lo).any(|(h, l)| l > h) {
        return Err(Error::invalid("solver requires n_lo <= n_hi"));
    }
    Ok(())
}

/// One DDIM increment between two time points, given ε̂ at the upper one.
pub fn ddim_increment_at(
    z: &[f64],
    hi: TimePoint,
    lo: TimePoint,
    eps: &[f64],
    out: &mut Vec<f64>,
) -> Result<()> {
    if hi.alpha < ALPHA_GUARD {
        return Err(Error::DegenerateSchedule(hi.alpha));
    }
    for (&zv, &ev) in z.iter().zip(eps) {
        let x0 = (zv - hi.sigma * ev) / hi.alpha;
        out.push(lo.alpha * x0 + lo.sigma * ev - zv);
    }
    Ok(())
}

/// `Ψ = α(t_lo)·x̂₀ + σ(t_lo)·ε̂ − z` with `x̂₀ = (z − σ(t_hi)·ε̂)/α(t_hi)`.
pub fn ddim_increment(
    z: &Tensor,
    hi: &[usize],
    lo: &[usize],
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    check_rows(z, hi, lo)?;
    z.same_shape("ddim_increment", eps)?;
    let mut out = Vec::with_capacity(z.len());
    for r in 0..z.rows() {
        if hi[r] == lo[r] {
            s.point(hi[r])?;
            out.extend(std::iter::repeat_n(0.0, z.cols()));
            continue;
        }
        ddim_increment_at(z.row(r), s.point(hi[r])?, s.point(lo[r])?, eps.row(r), &mut out)?;
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Second-order singlestep solver in log-SNR time `λ = log(α/σ)`.
///
/// With `h = λ_lo − λ_hi` and the midpoint `λ_m = λ_hi + h/2`:
///
/// ```text
/// u    = (α_m/α_hi)·z − σ_m·(e^{h/2} − 1)·ε(z, t_hi)
/// z_lo = (α_lo/α_hi)·z − σ_lo·(e^{h} − 1)·ε(u, t_m)
/// ```
///
/// This is the exponential-integrator form of the PF-ODE
/// `d(z/α) = ε·d(σ/α)`; with the second ε-query dropped it reduces to DDIM.
pub fn dpm2_increment(
    z: &Tensor,
    hi: &[usize],
    lo: &[usize],
    model: &dyn EpsModel,
    cond: &[Condition],
    s: &NoiseSchedule,
) -> Result<Tensor> {
    check_rows(z, hi, lo)?;
    let p_hi = points(s, hi)?;
    let p_lo = points(s, lo)?;
    if let Some(p) = p_hi.iter().find(|p| p.alpha < ALPHA_GUARD) {
        return Err(Error::DegenerateSchedule(p.alpha));
    }
    let eps_hi = model.eps(z, &p_hi, cond)?;

    let cols = z.cols();
    let mut p_mid = Vec::with_capacity(z.rows());
    let mut u = Vec::with_capacity(z.len());
    for r in 0..z.rows() {
        let (a, b) = (p_hi[r], p_lo[r]);
        let h = b.log_snr() - a.log_snr();
        let m = if hi[r] == lo[r] {
            a
        } else {
            s.point_at_log_snr(a.log_snr() + 0.5 * h)?
        };
        let k = m.sigma * (0.5 * h).exp_m1();
        u.extend(
            z.row(r)
                .iter()
                .zip(eps_hi.row(r))
                .map(|(&zv, &ev)| (m.alpha / a.alpha) * zv - k * ev),
        );
        p_mid.push(m);
    }
    let u = Tensor::new(z.shape().to_vec(), u)?;
    let eps_mid = model.eps(&u, &p_mid, cond)?;

    let mut out = Vec::with_capacity(z.len());
    for r in 0..z.rows() {
        if hi[r] == lo[r] {
            out.extend(std::iter::repeat_n(0.0, cols));
            continue;
        }
        let (a, b) = (p_hi[r], p_lo[r]);
        let k = b.sigma * (b.log_snr() - a.log_snr()).exp_m1();
        out.extend(
            z.row(r)
                .iter()
                .zip(eps_mid.row(r))
                .map(|(&zv, &ev)| (b.alpha / a.alpha) * zv - k * ev - zv),
        );
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Ψ for the chosen solver kind.
pub fn solver_increment(
    kind: SolverKind,
    z: &Tensor,
    hi: &[usize],
    lo: &[usize],
    model: &dyn EpsModel,
    cond: &[Condition],
    s: &NoiseSchedule,
) -> Result<Tensor> {
    match kind {
        SolverKind::Ddim => {
            check_rows(z, hi, lo)?;
            let eps = model.eps(z, &points(s, hi)?, cond)?;
            ddim_increment(z, hi, lo, &eps, s)
        }
        SolverKind::Dpm2 => dpm2_increment(z, hi, lo, model, cond, s),
    }
}

/// Guided target `ẑ = z + (1+ω)·Ψ_c − ω·Ψ_∅`, evaluated as
/// `z + (Ψ_c + ω·(Ψ_c − Ψ_∅))` so that ω = 0 and Ψ_c = Ψ_∅ are exact.
#[allow(clippy::too_many_arguments)]
pub fn cfg_target(
    z: &Tensor,
    hi: &[usize],
    lo: &[usize],
    cond: &[Condition],
    omega: &[f64],
    teacher: &dyn EpsModel,
    kind: SolverKind,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if omega.len() != z.rows() {
        return Err(Error::invalid("one guidance scale per row required"));
    }
    if omega.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::invalid("guidance scale must be non-negative"));
    }
    let psi_c = solver_increment(kind, z, hi, lo, teacher, cond, s)?;
    if omega.iter().all(|&w| w == 0.0) {
        return z.add(&psi_c);
    }
    let null = vec![Condition::Null; z.rows()];
    let psi_u = solver_increment(kind, z, hi, lo, teacher, &null, s)?;

    let cols = z.cols();
    let mut out = Vec::with_capacity(z.len());
    for (r, &w) in omega.iter().enumerate() {
        for c in 0..cols {
            let i = r * cols + c;
            let (pc, pu) = (psi_c.data()[i], psi_u.data()[i]);
            out.push(z.data()[i] + (pc + w * (pc - pu)));
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Isotropic Gaussian data `N(m, s_d²I)`: exact ε and exact PF-ODE flow.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || mean.is_empty() {
            return Err(Error::invalid("oracle needs a non-empty mean and positive scale"));
        }
        Ok(Self { mean, scale })
    }

    fn gamma(&self, p: TimePoint) -> f64 {
        (p.alpha * p.alpha * self.scale * self.scale + p.sigma * p.sigma).sqrt()
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.cols() != self.mean.len() {
            return Err(Error::Shape {
                op: "gaussian oracle",
                left: z.shape().to_vec(),
                right: vec![self.mean.len()],
            });
        }
        Ok(())
    }

    /// `ε* = σ·(z − α·m) / (α²s_d² + σ²)`.
    pub fn eps_at(&self, z: &Tensor, at: &[TimePoint]) -> Result<Tensor> {
        self.check(z)?;
        let mut out = Vec::with_capacity(z.len());
        for (r, p) in at.iter().enumerate() {
            let g2 = self.gamma(*p).powi(2);
            out.extend(
                z.row(r)
                    .iter()
                    .zip(&self.mean)
                    .map(|(zv, m)| p.sigma * (zv - p.alpha * m) / g2),
            );
        }
        Tensor::new(z.shape().to_vec(), out)
    }

    /// Closed-form transport `z_lo = α_lo·m + (γ_lo/γ_hi)·(z_hi − α_hi·m)`.
    pub fn flow_between(&self, z: &Tensor, hi: TimePoint, lo: TimePoint) -> Result<Tensor> {
        self.check(z)?;
        let ratio = self.gamma(lo) / self.gamma(hi);
        let mut out = Vec::with_capacity(z.len());
        for r in 0..z.rows() {
            out.extend(
                z.row(r)
                    .iter()
                    .zip(&self.mean)
                    .map(|(zv, m)| lo.alpha * m + ratio * (zv - hi.alpha * m)),
            );
        }
        Tensor::new(z.shape().to_vec(), out)
    }
}

impl EpsModel for GaussianOracle {
    fn eps(&self, z: &Tensor, at: &[TimePoint], _cond: &[Condition]) -> Result<Tensor> {
        self.eps_at(z, at)
    }
}

/// Exact PF-ODE transport of `z` from `t_{n_hi}` to `t_{n_lo}` for Gaussian data.
pub fn oracle_flow(
    z: &Tensor,
    n_hi: usize,
    n_lo: usize,
    oracle: &GaussianOracle,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let (hi, lo) = (s.point(n_hi)?, s.point(n_lo)?);
    if n_hi == n_lo {
        oracle.check(z)?;
        return Ok(z.clone());
    }
    oracle.flow_between(z, hi, lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::schedule::ScheduleConfig;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap()
    }

    fn rand_z(rows: usize, seed: u64) -> Tensor {
        let mut s = Rng::new(seed).stream("z", 0);
        Tensor::new(vec![rows, 2], s.normals(rows * 2)).unwrap()
    }

    /// ε that ignores its condition: Ψ_c and Ψ_∅ coincide.
    struct Unconditional(GaussianOracle);

    impl EpsModel for Unconditional {
        fn eps(&self, z: &Tensor, at: &[TimePoint], _: &[Condition]) -> Result<Tensor> {
            self.0.eps_at(z, at)
        }
    }

    /// ε that shifts with the condition so the guided branch matters.
    struct Shifted(GaussianOracle);

    impl EpsModel for Shifted {
        fn eps(&self, z: &Tensor, at: &[TimePoint], cond: &[Condition]) -> Result<Tensor> {
            let base = self.0.eps_at(z, at)?;
            let mut d = base.into_data();
            for (r, c) in cond.iter().enumerate() {
                if let Condition::Class(k) = c {
                    d[r * 2] += 0.1 * (*k as f64 + 1.0);
                }
            }
            Tensor::new(z.shape().to_vec(), d)
        }
    }

    #[test]
    fn equal_indices_give_zero_increment() {
        let s = sched();
        let z = rand_z(3, 1);
        let oracle = GaussianOracle::new(vec![2.0, 0.0], 0.5).unwrap();
        let eps = oracle.eps_at(&z, &[s.point(7).unwrap(); 3]).unwrap();
        let d = ddim_increment(&z, &[7; 3], &[7; 3], &eps, &s).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        let cond = [Condition::Class(0); 3];
        for kind in [SolverKind::Ddim, SolverKind::Dpm2] {
            let d = solver_increment(kind, &z, &[7; 3], &[7; 3], &oracle, &cond, &s).unwrap();
            assert!(d.data().iter().all(|&v| v == 0.0), "{kind}");
        }
    }

    #[test]
    fn ddim_with_fixed_x0() {
        let s = sched();
        let x = Tensor::new(vec![1, 2], vec![0.3, -1.2]).unwrap();
        let eps = Tensor::new(vec![1, 2], vec![0.7, 0.1]).unwrap();
        let (hi, lo) = (30, 12);
        let z = s.add_noise(&x, hi, &eps).unwrap();
        let next = z.add(&ddim_increment(&z, &[hi], &[lo], &eps, &s).unwrap()).unwrap();
        let expected = s.add_noise(&x, lo, &eps).unwrap();
        assert!(next.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn rejects_reversed_indices() {
        let s = sched();
        let z = rand_z(1, 2);
        assert!(ddim_increment(&z, &[3], &[5], &z, &s).is_err());
    }

    #[test]
    fn unit_gaussian_flow_is_identity() {
        let s = sched();
        let oracle = GaussianOracle::new(vec![0.0, 0.0], 1.0).unwrap();
        let z = rand_z(4, 3);
        assert_eq!(oracle_flow(&z, 50, 1, &oracle, &s).unwrap(), z);
        let o2 = GaussianOracle::new(vec![2.0, 0.0], 0.5).unwrap();
        assert_eq!(oracle_flow(&z, 9, 9, &o2, &s).unwrap(), z);
    }

    /// RK4 on `dx/dρ = ε*(α·x, ρ)` with `ρ = σ/α`, `x = z/α`: an integration
    /// path independent of the closed form.
    fn fine_integrate(oracle: &GaussianOracle, z: &[f64], hi: TimePoint, lo: TimePoint, steps: usize) -> Vec<f64> {
        let eps = |x: &[f64], rho: f64| -> Vec<f64> {
            let a = 1.0 / (1.0 + rho * rho).sqrt();
            let s = rho * a;
            let g2 = a * a * oracle.scale.powi(2) + s * s;
            x.iter()
                .zip(&oracle.mean)
                .map(|(xv, m)| s * (a * xv - a * m) / g2)
                .collect()
        };
        let (r0, r1) = (hi.sigma / hi.alpha, lo.sigma / lo.alpha);
        let dr = (r1 - r0) / steps as f64;
        let mut x: Vec<f64> = z.iter().map(|v| v / hi.alpha).collect();
        let axpy = |x: &[f64], k: &[f64], c: f64| -> Vec<f64> {
            x.iter().zip(k).map(|(a, b)| a + c * b).collect()
        };
        for i in 0..steps {
            let r = r0 + dr * i as f64;
            let k1 = eps(&x, r);
            let k2 = eps(&axpy(&x, &k1, dr / 2.0), r + dr / 2.0);
            let k3 = eps(&axpy(&x, &k2, dr / 2.0), r + dr / 2.0);
            let k4 = eps(&axpy(&x, &k3, dr), r + dr);
            for j in 0..x.len() {
                x[j] += dr / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        x.iter().map(|v| v * lo.alpha).collect()
    }

    #[test]
    fn closed_form_flow_matches_fine_integration() {
        let s = sched();
        let oracle = GaussianOracle::new(vec![2.0, 0.0], 0.5).unwrap();
        let z = rand_z(3, 4);
        for (hi, lo) in [(50, 1), (40, 10), (25, 24)] {
            let closed = oracle_flow(&z, hi, lo, &oracle, &s).unwrap();
            for r in 0..3 {
                let fine = fine_integrate(&oracle, z.row(r), s.point(hi).unwrap(), s.point(lo).unwrap(), 10_000);
                for (a, b) in closed.row(r).iter().zip(&fine) {
                    assert!((a - b).abs() < 1e-6, "{hi}->{lo}: {a} vs {b}");
                }
            }
        }
    }

    fn compose(kind: SolverKind, z: &Tensor, grid: &[usize], oracle: &GaussianOracle, s: &NoiseSchedule) -> Tensor {
        let rows = z.rows();
        let cond = vec![Condition::Null; rows];
        let mut z = z.clone();
        for w in grid.windows(2) {
            let d = solver_increment(kind, &z, &vec![w[0]; rows], &vec![w[1]; rows], oracle, &cond, s).unwrap();
            z = z.add(&d).unwrap();
        }
        z
    }

    /// Nested index grid from `n` down to `end`.
    fn grid_to(n: usize, end: usize, steps: usize) -> Vec<usize> {
        (0..=steps).map(|i| n - i * (n - end) / steps).collect()
    }

    fn grid(n: usize, steps: usize) -> Vec<usize> {
        grid_to(n, 1, steps)
    }

    #[test]
    fn many_substep_ddim_converges_to_closed_form() {
        // Unit-variance data: the exact flow is the identity.
        let s = NoiseSchedule::new(1025, 1e-4, 0.05 * 50.0 / 1025.0).unwrap();
        let oracle = GaussianOracle::new(vec![0.0, 0.0], 1.0).unwrap();
        let z = rand_z(4, 5);
        let end = compose(SolverKind::Ddim, &z, &grid(1025, 1024), &oracle, &s);
        let err = end.max_abs_diff(&oracle_flow(&z, 1025, 1, &oracle, &s).unwrap()).unwrap();
        assert!(err < 1e-2, "{err}");

        let shifted = GaussianOracle::new(vec![2.0, 0.0], 0.5).unwrap();
        let exact = oracle_flow(&z, 1025, 1, &shifted, &s).unwrap();
        let coarse = compose(SolverKind::Ddim, &z, &grid(1025, 64), &shifted, &s);
        let fine = compose(SolverKind::Ddim, &z, &grid(1025, 1024), &shifted, &s);
        let (ec, ef) = (coarse.max_abs_diff(&exact).unwrap(), fine.max_abs_diff(&exact).unwrap());
        // First order: 16x more steps, roughly 16x less error.
        assert!(ef < ec / 10.0, "{ec} {ef}");
    }

    #[test]
    fn dpm2_is_second_order_and_close_to_ddim() {
        let s = NoiseSchedule::new(1025, 1e-4, 0.05 * 50.0 / 1025.0).unwrap();
        let oracle = GaussianOracle::new(vec![2.0, 0.0], 0.5).unwrap();
        let z = rand_z(4, 6);
        // End at t ≈ 0.02: the log-SNR blows up as t → 0, and grids that reach
        // index 1 stay pre-asymptotic there.
        let exact = oracle_flow(&z, 1025, 21, &oracle, &s).unwrap();
        let e = |steps| compose(SolverKind::Dpm2, &z, &grid_to(1025, 21, steps), &oracle, &s).max_abs_diff(&exact).unwrap();
        let ratio = e(32) / e(64);
        assert!((3.4..=4.6).contains(&ratio), "ratio {ratio}");

        // Single steps: |dpm2 − ddim| shrinks quadratically with the λ-gap.
        let rows = z.rows();
        let cond = vec![Condition::Null; rows];
        let gap = |lo: usize| {
            let a = solver_increment(SolverKind::Dpm2, &z, &vec![600; rows], &vec![lo; rows], &oracle, &cond, &s).unwrap();
            let b = solver_increment(SolverKind::Ddim, &z, &vec![600; rows], &vec![lo; rows], &oracle, &cond, &s).unwrap();
            let dl = s.point(lo).unwrap().log_snr() - s.point(600).unwrap().log_snr();
            (a.max_abs_diff(&b).unwrap(), dl)
        };
        let (d1, l1) = gap(560);
        let (d2, l2) = gap(580);
        let order = (d1 / d2).ln() / (l1 / l2).ln();
        assert!((1.7..=2.3).contains(&order), "observed order {order}");
    }

    #[test]
    fn cfg_identities() {
        let s = sched();
        let oracle = GaussianOracle::new(vec![2.0, 0.0], 0.5).unwrap();
        let z = rand_z(5, 7);
        let cond: Vec<Condition> = (0..5).map(Condition::Class).collect();
        let shifted = Shifted(oracle.clone());
        for kind in [SolverKind::Ddim, SolverKind::Dpm2] {
            let zero = cfg_target(&z, &[20; 5], &[15; 5], &cond, &[0.0; 5], &shifted, kind, &s).unwrap();
            let single = z.add(&solver_increment(kind, &z, &[20; 5], &[15; 5], &shifted, &cond, &s).unwrap()).unwrap();
            assert_eq!(zero, single);

            let same = Unconditional(oracle.clone());
            let a = cfg_target(&z, &[20; 5], &[15; 5], &cond, &[1.0; 5], &same, kind, &s).unwrap();
            let b = cfg_target(&z, &[20; 5], &[15; 5], &cond, &[7.5; 5], &same, kind, &s).unwrap();
            assert_eq!(a, b);

            // Guidance actually moves the target when branches differ.
            let g = cfg_target(&z, &[20; 5], &[15; 5], &cond, &[7.5; 5], &shifted, kind, &s).unwrap();
            assert!(g.max_abs_diff(&zero).unwrap() > 1e-3);
        }
    }

    #[test]
    fn cfg_matches_literal_formula() {
        let s = sched();
        let shifted = Shifted(GaussianOracle::new(vec![2.0, 0.0], 0.5).unwrap());
        let z = rand_z(3, 8);
        let cond = [Condition::Class(1), Condition::Class(2), Condition::Class(5)];
        let w = [0.5, 2.0, 7.5];
        let got = cfg_target(&z, &[30; 3], &[25; 3], &cond, &w, &shifted, SolverKind::Ddim, &s).unwrap();
        let pc = solver_increment(SolverKind::Ddim, &z, &[30; 3], &[25; 3], &shifted, &cond, &s).unwrap();
        let pu = solver_increment(SolverKind::Ddim, &z, &[30; 3], &[25; 3], &shifted, &[Condition::Null; 3], &s).unwrap();
        for (r, &wr) in w.iter().enumerate() {
            for c in 0..2 {
                let expected = z.at(r, c) + (1.0 + wr) * pc.at(r, c) - wr * pu.at(r, c);
                assert!((got.at(r, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solver_kind_parses() {
        assert_eq!("ddim".parse::<SolverKind>().unwrap(), SolverKind::Ddim);
        assert_eq!("dpm2".parse::<SolverKind>().unwrap(), SolverKind::Dpm2);
        assert!("euler".parse::<SolverKind>().is_err());
    }
}
