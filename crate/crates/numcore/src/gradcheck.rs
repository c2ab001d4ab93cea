use crate::tensor::Tensor;

/// Central-difference gradient estimate of a scalar function at `x`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape(), grad).expect("gradient has the shape of x")
}

/// Largest violation of `|a - b| <= rel * max(|a|, |b|) + abs` over all
/// elements, expressed as a ratio (≤ 1 means every element passes).
pub fn grad_mismatch(analytic: &Tensor, numeric: &Tensor, rel: f64, abs: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / (rel * a.abs().max(b.abs()) + abs))
        .fold(0.0, f64::max)
}
