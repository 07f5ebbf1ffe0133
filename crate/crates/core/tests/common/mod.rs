//! Shared finite-difference oracle for the gradient suites. Independent of
//! the library's backward passes: it only evaluates forward losses.

use npdk_core::Tensor;

/// Central finite difference of `loss` w.r.t. one coordinate, step `h`.
pub fn central_diff<F: FnMut() -> f64>(value: &mut f64, h: f64, mut loss: F) -> f64 {
    let orig = *value;
    *value = orig + h;
    let fp = loss();
    *value = orig - h;
    let fm = loss();
    *value = orig;
    (fp - fm) / (2.0 * h)
}

/// Mixed absolute/relative error: |a - n| / max(|a|, |n|, 1e-3). The 1e-3
/// floor absorbs the f64 noise floor of central differences at h = 1e-5.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks every coordinate of `tensor` against central differences of
/// `loss`, returning the worst mixed error.
pub fn check_tensor_grad<F: FnMut(&Tensor) -> f64>(
    tensor: &mut Tensor,
    analytic: &Tensor,
    h: f64,
    mut loss: F,
) -> f64 {
    assert_eq!(tensor.shape(), analytic.shape());
    let mut worst = 0.0f64;
    for i in 0..tensor.numel() {
        let mut probe = tensor.clone();
        let numeric = {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let fp = loss(&probe);
            probe.data_mut()[i] = orig - h;
            let fm = loss(&probe);
            probe.data_mut()[i] = orig;
            (fp - fm) / (2.0 * h)
        };
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// Uniform values in (-1, 1), deterministic in `rng`.
pub fn fill_uniform<R: rand::Rng>(t: &mut Tensor, rng: &mut R, scale: f64) {
    for v in t.data_mut() {
        *v = rng.gen_range(-scale..scale);
    }
}

/// Smallest absolute value; a margin below means a ReLU kink sits too close
/// to the evaluation point for finite differences to be valid.
pub fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}
