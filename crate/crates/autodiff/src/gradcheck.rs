//! Central finite differences, used as an independent oracle for `backward`.

use crate::tensor::Tensor;

/// Central-difference estimate of `df/dx` at every coordinate of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    let values = finite_difference_at(&mut f, x, eps, &coords);
    Tensor::new(x.shape().to_vec(), values).expect("same shape as input")
}

/// Central-difference estimates at the selected flat coordinates only.
pub fn finite_difference_at<F>(mut f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Vec<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients
/// from turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest [`relative_error`] over paired gradient entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n, floor))
        .fold(0.0, f64::max)
}
