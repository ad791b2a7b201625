//! Central finite differences for checking the hand-derived backward passes.

use crate::tensor::Tensor;

/// `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for every element of `x`, in FP64.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, eps: f64) -> Tensor<f64>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Relative gradient error `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu_scalar;

    #[test]
    fn quadratic() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_slope_at_origin() {
        let x = Tensor::zeros(&[3]);
        let g = finite_diff_grad(|t| t.data().iter().map(|&v| gelu_scalar(v)).sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }
}
