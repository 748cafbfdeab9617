use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Coordinates whose
    /// gradients are both below it are compared in absolute terms against
    /// this scale, which keeps round-off in near-zero gradients from
    /// dominating the report.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against `(f(x + eps·eᵢ) - f(x - eps·eᵢ)) / 2eps`,
/// where `eval(i, delta)` returns the loss with coordinate `i` shifted by
/// `delta`.
pub fn compare_central_differences(
    analytic: &[f64],
    cfg: &GradCheckConfig,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for (i, &a) in analytic.iter().enumerate() {
        let plus = eval(i, cfg.eps)?;
        let minus = eval(i, -cfg.eps)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "loss is not finite when probing coordinate {i}"
            )));
        }
        let n = (plus - minus) / (2.0 * cfg.eps);
        let rel = relative_error(a, n, cfg.floor);
        if rel > max_rel_error || rel.is_nan() {
            max_rel_error = rel;
            worst_index = i;
        }
        numeric.push(n);
    }
    Ok(GradCheckReport {
        analytic: analytic.to_vec(),
        numeric,
        passed: max_rel_error <= cfg.tolerance,
        max_rel_error,
        worst_index,
    })
}

/// Checks the gradient of the scalar built by `f` from input `x`.
///
/// `f` receives a fresh graph and the variable holding `x` and must return
/// a one-element node.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x);
    let loss = f(&mut g, xv)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Evaluation("loss is not finite at the base point".into()));
    }
    g.backward(loss)?;
    let analytic = g.grad(xv).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut probe = x.clone();
    probe.set_requires_grad(false);
    compare_central_differences(&analytic, cfg, |i, delta| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + delta;
        let mut g = Graph::new();
        let xv = g.constant(probe.clone());
        let out = f(&mut g, xv);
        probe.data_mut()[i] = orig;
        Ok(g.value(out?).data()[0])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_essentially_exact() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(|g, x| g.sum(x), &x, &GradCheckConfig::default()).unwrap();
        assert!(r.passed);
        assert_eq!(r.analytic, vec![1.0; 3]);
        // Central differences of a linear map only carry round-off.
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn square_matches_closed_form() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.analytic, vec![2.0, 4.0, 6.0]);
        for (n, want) in r.numeric.iter().zip([2.0, 4.0, 6.0]) {
            assert!((n - want).abs() < 1e-8, "{n} vs {want}");
        }
        assert!(r.passed);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let r = compare_central_differences(&[1.0, 5.0], &GradCheckConfig::default(), |i, d| {
            Ok(if i == 0 { d } else { 2.0 * d })
        })
        .unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn non_finite_probe_is_an_evaluation_error() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let s = g.sum(x)?;
                let v = g.value(s).data()[0];
                let c = g.constant(Tensor::scalar(if v != 0.0 { f64::NAN } else { 0.0 }));
                g.add(s, c)
            },
            &x,
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }
}
