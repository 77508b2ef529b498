use super::ParamVector;

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-8)` between the analytic
/// gradient `a` and the central difference `n = (f(θ+ε) − f(θ−ε)) / 2ε`,
/// over every coordinate.
pub fn grad_check(f: impl Fn(&ParamVector) -> f64, analytic: &ParamVector, theta: &ParamVector, eps: f64) -> f64 {
    grad_check_coords(f, analytic, theta, eps, 0..theta.len())
}

/// [`grad_check`] restricted to the given coordinates.
pub fn grad_check_coords(
    f: impl Fn(&ParamVector) -> f64,
    analytic: &ParamVector,
    theta: &ParamVector,
    eps: f64,
    coords: impl IntoIterator<Item = usize>,
) -> f64 {
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = probe.values[i];
        probe.values[i] = orig + eps;
        let plus = f(&probe);
        probe.values[i] = orig - eps;
        let minus = f(&probe);
        probe.values[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.values[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{TensorKind, TensorSpec};

    fn scalar(v: f64) -> ParamVector {
        let spec = TensorSpec { name: "x".into(), kind: TensorKind::Weight, rows: 1, cols: 1, offset: 0 };
        ParamVector { values: vec![v], manifest: vec![spec].into() }
    }

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|t| t.values[0] * t.values[0], &scalar(6.0), &scalar(3.0), 1e-5);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn constant_function() {
        assert_eq!(grad_check(|_| 4.2, &scalar(0.0), &scalar(3.0), 1e-5), 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(|t| t.values[0] * t.values[0], &scalar(7.0), &scalar(3.0), 1e-5);
        assert!(err > 0.1);
    }
}
