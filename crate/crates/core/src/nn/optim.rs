use super::{NnError, ParamVector};

/// `θ' = θ − lr·(grad + l2·θ)`, with biases exempt from the L2 term.
pub fn sgd_step(theta: &ParamVector, grad: &ParamVector, lr: f64, l2: f64) -> Result<ParamVector, NnError> {
    if !theta.same_layout(grad) {
        return Err(super::shape_err(format!("{} parameters", theta.len()), format!("{} gradients", grad.len())));
    }
    if grad.values.iter().any(|g| !g.is_finite()) {
        return Err(NnError::NonfiniteGradient);
    }
    let bias = theta.bias_mask();
    let values = theta
        .values
        .iter()
        .zip(&grad.values)
        .zip(bias)
        .map(|((&t, &g), is_bias)| if is_bias { t - lr * g } else { t - lr * (g + l2 * t) })
        .collect();
    Ok(ParamVector { values, manifest: theta.manifest.clone() })
}

/// Rescale `grad` so its L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grad: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        grad.values.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{TensorKind, TensorSpec};

    fn pv(values: Vec<f64>, kind: TensorKind) -> ParamVector {
        let spec = TensorSpec { name: "t".into(), kind, rows: values.len(), cols: 1, offset: 0 };
        ParamVector { values, manifest: vec![spec].into() }
    }

    #[test]
    fn weight_decay_step() {
        let out = sgd_step(&pv(vec![1.0], TensorKind::Weight), &pv(vec![0.0], TensorKind::Weight), 0.1, 0.5).unwrap();
        assert!((out.values[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn bias_is_not_decayed() {
        let out = sgd_step(&pv(vec![1.0], TensorKind::Bias), &pv(vec![0.0], TensorKind::Bias), 0.1, 0.5).unwrap();
        assert_eq!(out.values, vec![1.0]);
    }

    #[test]
    fn plain_step_and_fixed_point() {
        let theta = pv(vec![2.0, -3.0], TensorKind::Weight);
        let out = sgd_step(&theta, &pv(vec![1.0, 0.0], TensorKind::Weight), 0.1, 0.0).unwrap();
        assert!((out.values[0] - 1.9).abs() < 1e-15);
        let same = sgd_step(&theta, &theta.zeros_like(), 0.1, 0.0).unwrap();
        assert_eq!(same, theta);
    }

    #[test]
    fn errors() {
        let theta = pv(vec![1.0], TensorKind::Weight);
        assert_eq!(sgd_step(&theta, &pv(vec![f64::NAN], TensorKind::Weight), 0.1, 0.0), Err(NnError::NonfiniteGradient));
        assert!(matches!(
            sgd_step(&theta, &pv(vec![1.0, 2.0], TensorKind::Weight), 0.1, 0.0),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn clipping() {
        let mut g = pv(vec![3.0, 4.0], TensorKind::Weight);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
        let mut small = pv(vec![0.3, 0.4], TensorKind::Weight);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.values, vec![0.3, 0.4]);
    }
}
