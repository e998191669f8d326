use proptest::prelude::*;

use qntz_core::fixed_point::{covering_exponent, pow2, quantize_value, requantize, FixedPointFormat, MANTISSA_MAX};

proptest! {
    #[test]
    fn round_trip_error_is_at_most_half_a_step(e in -12i32..4, m in -127.0f64..127.0) {
        let x = m * pow2(e);
        let f = FixedPointFormat::new(e);
        let back = f.dequantize(quantize_value(x, e)) as f64;
        prop_assert!((x - back).abs() <= pow2(e - 1) * (1.0 + 1e-12));
    }

    #[test]
    fn covering_exponent_is_minimal(max_abs in 1e-6f64..1e6) {
        let e = covering_exponent(max_abs, MANTISSA_MAX);
        prop_assert!(max_abs <= MANTISSA_MAX as f64 * pow2(e));
        prop_assert!(max_abs > MANTISSA_MAX as f64 * pow2(e - 1));
    }

    #[test]
    fn requantize_matches_exact_rounding(acc in any::<i32>(), m in 0i32..128, shift in -30i32..4) {
        let exact = acc as f64 * m as f64 * pow2(shift);
        // half away from zero, then saturate
        let want = (exact.abs() + 0.5).floor().copysign(exact).clamp(-128.0, 127.0);
        prop_assert_eq!(requantize(acc, m, shift) as f64, want);
    }

    #[test]
    fn quantize_saturates(x in 200.0f64..1e9) {
        prop_assert_eq!(quantize_value(x, 0), 127);
        prop_assert_eq!(quantize_value(-x, 0), -128);
    }
}

#[test]
fn requantize_extremes_do_not_overflow() {
    assert_eq!(requantize(i32::MAX, 127, 20), 127);
    assert_eq!(requantize(i32::MIN, 127, 20), -128);
    assert_eq!(requantize(i32::MIN, 1, -200), 0);
    assert_eq!(requantize(3, 1, -1), 2);
    assert_eq!(requantize(-3, 1, -1), -2);
}
