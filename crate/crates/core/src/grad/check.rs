//! Central finite differences against analytic gradients.

use super::{Graph, GradError, Shape, Value};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// max |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// flat index of the worst coordinate
    pub worst: usize,
    pub checked: usize,
}

/// Compares `grad` with central differences of `value` around `x0`.
pub fn finite_diff_flat<S: Scalar>(
    x0: &[S],
    grad: &[S],
    eps: f64,
    mut value: impl FnMut(&[S]) -> Result<S, GradError>,
) -> Result<FdReport, GradError> {
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(x0.len(), grad.len());
    let mut x = x0.to_vec();
    let mut report = FdReport { max_rel_error: 0.0, worst: 0, checked: 0 };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = S::lit(orig.as_f64() + eps);
        let plus = finite(value(&x)?)?;
        x[i] = S::lit(orig.as_f64() - eps);
        let minus = finite(value(&x)?)?;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grad[i].as_f64();
        let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

fn finite<S: Scalar>(v: S) -> Result<f64, GradError> {
    let v = v.as_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GradError::NonFinite(v))
    }
}

/// Builds `f` over fresh leaves holding `params`, backpropagates, and checks
/// every coordinate against central differences.
pub fn finite_diff_check<S: Scalar>(
    params: &[(Shape, Vec<S>)],
    eps: f64,
    mut f: impl FnMut(&mut Graph<S>, &[Value]) -> Result<Value, GradError>,
) -> Result<FdReport, GradError> {
    let mut eval = |flat: &[S], want_grad: bool| -> Result<(S, Vec<S>), GradError> {
        let mut g = Graph::new();
        let mut leaves = Vec::with_capacity(params.len());
        let mut at = 0;
        for (shape, data) in params {
            let n = data.len();
            let chunk = flat[at..at + n].to_vec();
            at += n;
            leaves.push(if want_grad { g.variable(shape, chunk)? } else { g.constant(shape, chunk)? });
        }
        let root = f(&mut g, &leaves)?;
        let v = g.scalar(root);
        let mut grads = Vec::new();
        if want_grad {
            g.backward(root)?;
            for &l in &leaves {
                grads.extend_from_slice(&g.grad(l));
            }
        }
        Ok((v, grads))
    };
    let x0: Vec<S> = params.iter().flat_map(|(_, d)| d.iter().copied()).collect();
    let (v0, grad) = eval(&x0, true)?;
    finite(v0)?;
    finite_diff_flat(&x0, &grad, eps, |x| eval(x, false).map(|(v, _)| v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = finite_diff_check::<f64>(&[(vec![1], vec![1.0])], 1e-5, |g, p| {
            let sq = g.square(p[0]);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let r = finite_diff_check::<f64>(&[(vec![1], vec![0.0])], 1e-5, |g, p| {
            let l = g.log(p[0]);
            Ok(g.sum(l))
        });
        assert!(matches!(r, Err(GradError::NonFinite(_))));
    }
}
