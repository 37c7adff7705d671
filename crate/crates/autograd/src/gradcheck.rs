//! Central finite differences, for checking tape gradients against forward-only evaluation.

use crate::tensor::Tensor;

/// Numerical gradient of `f` at `point` by central differences with step `eps`.
pub fn numerical_grad(point: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = point.clone();
    let mut out = vec![0.0; point.numel()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(point.shape(), out).expect("same shape")
}

/// Largest relative error between two gradients, using `max(|a|, |b|, floor)` as the scale.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
