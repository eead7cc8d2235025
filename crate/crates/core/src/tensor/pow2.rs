//! Exponentials and logarithms with a power-of-two shift.
//!
//! `exp(x - k ln 2)` is evaluated as `exp(x - n ln 2) * 2^(n - k)` with
//! `n = round(x / ln 2)`. The first factor depends on `x` alone, and scaling
//! by a power of two is exact, so changing `k` rescales results exactly
//! (outside the subnormal range). `log(w) + k ln 2` is evaluated from the
//! binary mantissa and exponent of `w` for the same reason: any power-of-two
//! rescaling of `w` that is undone by `k` gives a bit-identical result.

use super::Scalar;

const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const LN2: f64 = std::f64::consts::LN_2;

/// Smallest integer `k` with `k ln 2 >= x`.
pub fn pow2_ceil_shift<T: Scalar>(x: T) -> i64 {
    let v = x.to_f64().unwrap_or(f64::NAN);
    let k = (v / LN2).ceil();
    // Guard against the rounding of v / ln 2 landing one step low.
    let k = if k * LN2 < v { k + 1.0 } else { k };
    k.clamp(-(1i64 << 40) as f64, (1i64 << 40) as f64) as i64
}

/// `2^k` for `k` in the normal exponent range of `f64`.
fn exp2i(k: i64) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

fn ldexp(mut y: f64, mut k: i64) -> f64 {
    while k < -1000 {
        if y == 0.0 {
            return y;
        }
        y *= exp2i(-1000);
        k += 1000;
    }
    while k > 1000 {
        if !y.is_finite() {
            return y;
        }
        y *= exp2i(1000);
        k -= 1000;
    }
    y * exp2i(k)
}

/// `exp(x - k ln 2)`.
pub fn exp_shifted<T: Scalar>(x: T, k: i64) -> T {
    let v = x.to_f64().unwrap_or(f64::NAN);
    if !v.is_finite() {
        return T::from_f64((v - k as f64 * LN2).exp()).unwrap_or(T::nan());
    }
    let n = (v / LN2).round();
    let r = (v - n * LN2_HI) - n * LN2_LO;
    // r is in [-ln 2 / 2, ln 2 / 2], where the native exp is accurate.
    let y = T::from_f64(r).unwrap().exp();
    T::from_f64(ldexp(y.to_f64().unwrap(), n as i64 - k)).unwrap()
}

/// `ln(w) + k ln 2` for `w > 0`.
pub fn log_unshifted<T: Scalar>(w: T, k: i64) -> T {
    if !(w > T::zero()) || !w.is_finite() {
        let v = w.to_f64().unwrap_or(f64::NAN);
        return T::from_f64(v.ln() + k as f64 * LN2).unwrap_or(T::nan());
    }
    let (mantissa, exponent, _) = w.integer_decode();
    let bits = 64 - mantissa.leading_zeros() as i64;
    // w = f * 2^e with f in [0.5, 1)
    // f is exactly representable in T, so its native log depends on w only
    // through the mantissa.
    let f = T::from_f64(mantissa as f64 * exp2i(-bits)).unwrap();
    let e = exponent as i64 + bits + k;
    let ef = e as f64;
    T::from_f64(ef * LN2_HI + (ef * LN2_LO + f.ln().to_f64().unwrap())).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_is_a_tight_upper_bound() {
        for x in [-7.3f64, -0.0, 0.0, 0.5, LN2, 3.0 * LN2, 99.9, 1000.0] {
            let k = pow2_ceil_shift(x);
            assert!(k as f64 * LN2 >= x);
            assert!((k - 1) as f64 * LN2 < x);
        }
    }

    #[test]
    fn far_shifts_underflow_and_overflow_cleanly() {
        assert_eq!(exp_shifted(27_000.0f64, 43_000), 0.0);
        assert_eq!(exp_shifted(27_000.0f32, 43_000), 0.0);
        assert_eq!(exp_shifted(-2000.0f64, -5000), f64::INFINITY);
        assert_eq!(exp_shifted(1.0f64, 3000), 0.0);
    }

    #[test]
    fn exp_and_log_are_accurate() {
        for x in [-30.0f64, -1.0, 0.0, 0.3, 12.0, 700.0] {
            for k in [-5i64, 0, 17, 1010] {
                let want = (x - k as f64 * LN2).exp();
                let got = exp_shifted(x, k);
                // The reference itself loses ~|arg| ulps in the subtraction.
                let tol = 4e-16 * (1.0 + x.abs() + k.abs() as f64);
                if want > 1e-300 {
                    assert!(((got - want) / want).abs() < tol, "{x} {k}");
                }
            }
        }
        for w in [1e-300f64, 1e-5, 0.7, 1.0, 3.5e12] {
            for k in [-40i64, 0, 3] {
                let want = w.ln() + k as f64 * LN2;
                assert!((log_unshifted(w, k) - want).abs() <= 1e-13 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn power_of_two_rescaling_is_invisible() {
        for x in [-3.1f32, 0.25, 7.9, 80.0] {
            for (k1, k2) in [(10i64, 14i64), (120, 121), (0, 3)] {
                let a = exp_shifted(x, k1);
                let b = exp_shifted(x, k2);
                assert_eq!(a, b * 2f32.powi((k2 - k1) as i32));
                assert_eq!(log_unshifted(a, k1), log_unshifted(b, k2));
            }
        }
    }
}
