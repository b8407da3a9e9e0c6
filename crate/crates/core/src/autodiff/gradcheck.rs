use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Guarded relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, over every scalar of every parameter.
///
/// `f` receives a fresh tape and the leaf ids of `params` (in order) and
/// must return the id of a scalar loss.
pub fn grad_check<F>(params: &[Tensor], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid(format!(
            "finite-difference step {h:e} outside [1e-6, 1e-4]"
        )));
    }

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&i| grads.get_or_zeros(i)).collect();

    let mut eval = |ps: &[Tensor], param: usize, index: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let value = f(&mut tape, &ids)
            .map(|l| tape.value(l).item())
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::GradCheckNonFinite { param, index },
                other => other,
            })?;
        if !value.is_finite() {
            return Err(Error::GradCheckNonFinite { param, index });
        }
        Ok(value)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = eval(&work, p, i)?;
            work[p].data_mut()[i] = orig - h;
            let minus = eval(&work, p, i)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[p].data()[i], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(&[Tensor::scalar(3.0)], 1e-5, |t, p| {
            let sq = t.square(p[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(&[Tensor::scalar(1.5)], 1e-5, |t, _| {
            let c = t.constant(Tensor::scalar(4.0));
            t.sum(c)
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn step_outside_range_rejected() {
        assert!(grad_check(&[Tensor::scalar(1.0)], 1e-2, |t, p| t.sum(p[0])).is_err());
    }

    #[test]
    fn non_finite_reported_with_index() {
        // sqrt of a value that becomes non-positive under perturbation.
        let err = grad_check(&[Tensor::new(vec![2], vec![1.0, 5e-6]).unwrap()], 1e-5, |t, p| {
            let r = t.sqrt(p[0])?;
            t.sum(r)
        })
        .unwrap_err();
        assert!(
            matches!(err, Error::GradCheckNonFinite { param: 0, index: 1 }),
            "{err}"
        );
    }
}
