//! Distribution distances between sample sets.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Largest pooled sample used for the median heuristic. Bigger pools are
/// thinned by a fixed stride.
pub const MEDIAN_POOL_CAP: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled samples.
    #[default]
    Median,
    Fixed(f64),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::invalid("MMD needs at least 2 samples per side"));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            op: "mmd2",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Median pairwise Euclidean distance over `X ∪ Y`.
pub fn median_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    let total = x.rows() + y.rows();
    let stride = total.div_ceil(MEDIAN_POOL_CAP).max(1);
    let pool: Vec<&[f64]> = (0..total)
        .step_by(stride)
        .map(|i| if i < x.rows() { x.row(i) } else { y.row(i - x.rows()) })
        .collect();
    let mut d = Vec::with_capacity(pool.len() * (pool.len() - 1) / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            d.push(sq_dist(pool[i], pool[j]));
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let med = m.sqrt();
    if med > 0.0 {
        Ok(med)
    } else {
        // All points coincide: any positive bandwidth gives the same answer.
        Ok(1.0)
    }
}

fn mean_kernel(a: &Tensor, b: &Tensor, gamma: f64, same: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            if same && i == j {
                continue;
            }
            total += (-gamma * sq_dist(ai, b.row(j))).exp();
        }
    }
    let pairs = if same {
        a.rows() * (a.rows() - 1)
    } else {
        a.rows() * b.rows()
    };
    total / pairs as f64
}

/// Unbiased MMD² with kernel `k(x, y) = exp(−‖x−y‖² / (2h²))`.
pub fn mmd2(x: &Tensor, y: &Tensor, bandwidth: Bandwidth) -> Result<f64> {
    check_pair(x, y)?;
    let h = match bandwidth {
        Bandwidth::Median => median_distance(x, y)?,
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => return Err(Error::invalid(format!("bandwidth must be positive, got {h}"))),
    };
    let gamma = 1.0 / (2.0 * h * h);
    Ok(mean_kernel(x, x, gamma, true) + mean_kernel(y, y, gamma, true)
        - 2.0 * mean_kernel(x, y, gamma, false))
}

/// `(‖μ̂ − m‖₂, ‖Σ̂ − Σ‖_F)` with the unbiased sample covariance.
pub fn moments_error(samples: &Tensor, mean: &[f64], cov: &Tensor) -> Result<(f64, f64)> {
    let (n, d) = (samples.rows(), samples.cols());
    if n < 2 {
        return Err(Error::invalid("moments need at least 2 samples"));
    }
    if mean.len() != d || cov.shape() != [d, d] {
        return Err(Error::Shape {
            op: "moments_error",
            left: samples.shape().to_vec(),
            right: cov.shape().to_vec(),
        });
    }
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mu.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut sigma = vec![0.0; d * d];
    for i in 0..n {
        let r = samples.row(i);
        for a in 0..d {
            for b in 0..d {
                sigma[a * d + b] += (r[a] - mu[a]) * (r[b] - mu[b]);
            }
        }
    }
    let mean_err = mu.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let cov_err = sigma
        .iter()
        .zip(cov.data())
        .map(|(s, c)| (s / (n - 1) as f64 - c).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok((mean_err, cov_err))
}
