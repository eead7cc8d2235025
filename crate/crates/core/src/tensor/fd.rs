use super::{Scalar, Tensor};

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    let two_h = h + h;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / two_h);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as x")
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
        .fold(0.0, |acc, d| if d.is_nan() || acc.is_nan() { f64::NAN } else { acc.max(d) })
}

/// Normwise relative error `max|a - b| / max(max|a|, max|b|)`.
///
/// Returns `0` when both tensors are identically zero, and `NaN` if either
/// holds a non-finite value.
pub fn max_rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let diff = max_abs_diff(a, b);
    let scale = a.max_abs().to_f64().unwrap().max(b.max_abs().to_f64().unwrap());
    if !a.is_finite() || !b.is_finite() {
        return f64::NAN;
    }
    if scale == 0.0 {
        return 0.0;
    }
    diff / scale
}

/// As [`max_rel_err`], with the denominator raised to at least `floor`.
///
/// Gradients that are identically zero (a bias whose effect a softmax
/// cancels, say) have no meaningful relative error; the floor measures them
/// against a caller-chosen reference magnitude instead.
pub fn max_rel_err_floored<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    if !a.is_finite() || !b.is_finite() {
        return f64::NAN;
    }
    let scale = a.max_abs().to_f64().unwrap().max(b.max_abs().to_f64().unwrap()).max(floor);
    if scale == 0.0 {
        return 0.0;
    }
    max_abs_diff(a, b) / scale
}
