//! Discrete variance-preserving noise schedule.
//!
//! Timesteps are 1-based: `n ∈ 1..=N`, with normalized time `t_n = n / N`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "N")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.05,
        }
    }
}

/// Signal/noise coefficients at one (possibly off-grid) time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePoint {
    /// Normalized time in `(0, 1]`.
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl TimePoint {
    /// Log signal-to-noise ratio `log(α/σ)`.
    pub fn log_snr(&self) -> f64 {
        (self.alpha / self.sigma).ln()
    }

    /// VP point with the given log-SNR; `t` must be supplied by the caller.
    pub fn from_log_snr(t: f64, lambda: f64) -> Self {
        // α² = sigmoid(2λ), σ² = sigmoid(-2λ)
        let alpha = crate::autodiff::sigmoid(2.0 * lambda).sqrt();
        let sigma = crate::autodiff::sigmoid(-2.0 * lambda).sqrt();
        Self { t, alpha, sigma }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-β schedule over `n = 1..=N`.
    pub fn new(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs N >= 2, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "betas must lie in (0, 1), got [{beta_min}, {beta_max}]"
            )));
        }
        if beta_min > beta_max {
            return Err(Error::invalid(format!(
                "beta_min {beta_min} exceeds beta_max {beta_max}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect();
        let alpha_bar = beta
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            config: ScheduleConfig {
                steps,
                beta_min,
                beta_max,
            },
            beta,
            alpha_bar,
        })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::new(c.steps, c.beta_min, c.beta_max)
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Number of timesteps `N`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.len() {
            return Err(Error::TimestepOutOfRange {
                index: n,
                len: self.len(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, n: usize) -> Result<f64> {
        self.check(n)?;
        Ok(self.beta[n - 1])
    }

    pub fn alpha_bar(&self, n: usize) -> Result<f64> {
        self.check(n)?;
        Ok(self.alpha_bar[n - 1])
    }

    pub fn alpha(&self, n: usize) -> Result<f64> {
        Ok(self.alpha_bar(n)?.sqrt())
    }

    pub fn sigma(&self, n: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(n)?).sqrt())
    }

    pub fn t(&self, n: usize) -> Result<f64> {
        self.check(n)?;
        Ok(n as f64 / self.len() as f64)
    }

    /// Boundary time `t_1`.
    pub fn t_min(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn point(&self, n: usize) -> Result<TimePoint> {
        Ok(TimePoint {
            t: self.t(n)?,
            alpha: self.alpha(n)?,
            sigma: self.sigma(n)?,
        })
    }

    /// Off-grid point with log-SNR `lambda`, its normalized time linearly
    /// interpolated between the bracketing grid points.
    pub fn point_at_log_snr(&self, lambda: f64) -> Result<TimePoint> {
        let first = self.point(1)?;
        let last = self.point(self.len())?;
        if lambda > first.log_snr() || lambda < last.log_snr() {
            return Err(Error::invalid(format!(
                "log-SNR {lambda} outside the schedule range [{}, {}]",
                last.log_snr(),
                first.log_snr()
            )));
        }
        // log-SNR strictly decreases with n.
        let mut lo = first;
        for n in 2..=self.len() {
            let hi = self.point(n)?;
            if lambda >= hi.log_snr() {
                let (l0, l1) = (lo.log_snr(), hi.log_snr());
                let w = if l0 == l1 { 0.0 } else { (l0 - lambda) / (l0 - l1) };
                let t = lo.t + w * (hi.t - lo.t);
                return Ok(TimePoint::from_log_snr(t, lambda));
            }
            lo = hi;
        }
        Ok(TimePoint::from_log_snr(last.t, lambda))
    }

    /// `α(t_n)·z + σ(t_n)·ε`.
    pub fn add_noise(&self, z: &Tensor, n: usize, eps: &Tensor) -> Result<Tensor> {
        let (a, s) = (self.alpha(n)?, self.sigma(n)?);
        z.zip_map(eps, |zv, ev| a * zv + s * ev)
    }

    /// Row-wise [`add_noise`](Self::add_noise) with one timestep per row.
    pub fn add_noise_rows(&self, z: &Tensor, ns: &[usize], eps: &Tensor) -> Result<Tensor> {
        z.same_shape("add_noise", eps)?;
        if ns.len() != z.rows() {
            return Err(Error::invalid("one timestep per row required"));
        }
        let cols = z.cols();
        let mut out = Vec::with_capacity(z.len());
        for (r, &n) in ns.iter().enumerate() {
            let (a, s) = (self.alpha(n)?, self.sigma(n)?);
            out.extend(
                z.row(r)
                    .iter()
                    .zip(eps.row(r))
                    .map(|(zv, ev)| a * zv + s * ev),
            );
        }
        Tensor::new(vec![z.rows(), cols], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn two_step_cumulative_product() {
        let s = NoiseSchedule::new(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        assert!((s.sigma(2).unwrap() - 0.28f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_schedule_is_geometric() {
        let s = NoiseSchedule::new(10, 0.03, 0.03).unwrap();
        for n in 1..=10 {
            let expected = 0.97f64.powi(n as i32);
            assert!((s.alpha_bar(n).unwrap() - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn variance_preserving_and_monotone() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let mut prev = s.point(1).unwrap();
        assert!(s.alpha_bar(1).unwrap() < 1.0);
        assert!(s.alpha_bar(s.len()).unwrap() > 0.0);
        for n in 1..=s.len() {
            let p = s.point(n).unwrap();
            assert!((p.alpha.powi(2) + p.sigma.powi(2) - 1.0).abs() < 1e-12);
            let b = s.beta(n).unwrap();
            assert!(b > 0.0 && b < 1.0);
            if n > 1 {
                assert!(p.alpha < prev.alpha && p.sigma > prev.sigma);
            }
            prev = p;
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::new(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::new(5, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::new(5, 0.3, 0.2).is_err());
        let s = NoiseSchedule::new(5, 0.1, 0.2).unwrap();
        assert!(matches!(s.alpha(0), Err(Error::TimestepOutOfRange { .. })));
        assert!(s.alpha(6).is_err());
    }

    #[test]
    fn add_noise_cases() {
        let s = NoiseSchedule::new(2, 0.1, 0.2).unwrap();
        let z = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let e = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let out = s.add_noise(&z, 2, &e).unwrap();
        assert!((out.data()[0] - 0.72f64.sqrt()).abs() < 1e-15);
        assert!((out.data()[1] - 0.28f64.sqrt()).abs() < 1e-15);

        let zero = Tensor::zeros(&[2]);
        assert_eq!(
            s.add_noise(&zero, 1, &e).unwrap().data(),
            e.scale(s.sigma(1).unwrap()).data()
        );
        assert_eq!(
            s.add_noise(&z, 1, &zero).unwrap().data(),
            z.scale(s.alpha(1).unwrap()).data()
        );
        assert!(s.add_noise(&z, 3, &e).is_err());
        assert!(s.add_noise(&z, 1, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn noising_preserves_unit_variance() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let n = 200_000;
        let mut rng = Rng::new(11).stream("mc", 0);
        let z = Tensor::new(vec![n], rng.normals(n)).unwrap();
        let e = Tensor::new(vec![n], rng.normals(n)).unwrap();
        let out = s.add_noise(&z, 20, &e).unwrap();
        let mean = out.sum() / n as f64;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Standard error of the sample variance for a unit Gaussian is sqrt(2/n).
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }

    #[test]
    fn log_snr_points_interpolate_between_grid() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let (p10, p11) = (s.point(10).unwrap(), s.point(11).unwrap());
        let mid = 0.5 * (p10.log_snr() + p11.log_snr());
        let p = s.point_at_log_snr(mid).unwrap();
        assert!(p.t > p10.t && p.t < p11.t);
        assert!((p.log_snr() - mid).abs() < 1e-12);
        assert!((p.alpha.powi(2) + p.sigma.powi(2) - 1.0).abs() < 1e-12);
        let grid = s.point_at_log_snr(p10.log_snr()).unwrap();
        assert!((grid.t - p10.t).abs() < 1e-12);
    }
}
