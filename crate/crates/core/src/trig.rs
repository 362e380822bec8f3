//! Branch-free half-angle trigonometry for the phase hot loop.
//!
//! The integrator needs `cos α − 1` and `sin α` for thousands of phases per
//! step. Both follow from `s = sin(α/2)`, `c = cos(α/2)`:
//! `cos α − 1 = −2s²` (no cancellation near 2πℤ) and `sin α = 2sc`. Reducing
//! `α/2` modulo π flips the signs of `s` and `c` together, which leaves both
//! products unchanged, so no quadrant bookkeeping is needed. The code uses
//! only `+`, `*` and exact rounding tricks, so results are bit-identical on
//! every IEEE-754 platform and the loops vectorize.

use std::f64::consts::PI;

const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
const INV_TWO_PI: f64 = 1.0 / (2.0 * PI);
// Cody–Waite split of π: PI_A carries 33 bits so k·PI_A is exact for |k| < 2^20.
const PI_A: f64 = 3.141_592_653_468_251_2;
const PI_B: f64 = 1.215_420_101_301_238_4e-10;

/// Round to nearest (ties to even) for |x| < 2^51.
#[inline(always)]
pub fn round_nearest(x: f64) -> f64 {
    (x + MAGIC) - MAGIC
}

/// Reduced half-angle of a phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfAngle {
    /// sin(w) with w = α/2 − kπ ∈ [−π/2, π/2].
    pub s: f64,
    /// cos(w), nonnegative.
    pub c: f64,
    /// ⌊α / 2π⌋ as a float.
    pub turn_floor: f64,
}

impl HalfAngle {
    /// `cos α − 1`.
    #[inline(always)]
    pub fn cos_minus_one(&self) -> f64 {
        -2.0 * self.s * self.s
    }

    /// `sin α`.
    #[inline(always)]
    pub fn sin(&self) -> f64 {
        2.0 * self.s * self.c
    }

    /// `cos α`.
    #[inline(always)]
    pub fn cos(&self) -> f64 {
        1.0 - 2.0 * self.s * self.s
    }

    /// `sin²(α/2)`.
    #[cfg(test)]
    pub fn sin_half_sq(&self) -> f64 {
        self.s * self.s
    }
}

#[inline(always)]
fn sin_poly(w: f64) -> f64 {
    // Taylor series through w^19; truncation error < 3e-16 on [−π/2, π/2].
    let z = w * w;
    let p = 1.0 / 121_645_100_408_832_000.0; // −1/19! sign handled below
    let p = -p * z + 1.0 / 355_687_428_096_000.0;
    let p = p * z - 1.0 / 1_307_674_368_000.0;
    let p = p * z + 1.0 / 6_227_020_800.0;
    let p = p * z - 1.0 / 39_916_800.0;
    let p = p * z + 1.0 / 362_880.0;
    let p = p * z - 1.0 / 5_040.0;
    let p = p * z + 1.0 / 120.0;
    let p = p * z - 1.0 / 6.0;
    let p = p * z + 1.0;
    w * p
}

#[inline(always)]
fn cos_poly(w: f64) -> f64 {
    // Taylor series through w^20; truncation error < 2e-17 on [−π/2, π/2].
    let z = w * w;
    let p = 1.0 / 2_432_902_008_176_640_000.0;
    let p = p * z - 1.0 / 6_402_373_705_728_000.0;
    let p = p * z + 1.0 / 20_922_789_888_000.0;
    let p = p * z - 1.0 / 87_178_291_200.0;
    let p = p * z + 1.0 / 479_001_600.0;
    let p = p * z - 1.0 / 3_628_800.0;
    let p = p * z + 1.0 / 40_320.0;
    let p = p * z - 1.0 / 720.0;
    let p = p * z + 1.0 / 24.0;
    let p = p * z - 0.5;
    p * z + 1.0
}

/// Half-angle decomposition of `alpha`. Accurate to a few ulps for
/// |α| ≲ 10⁹.
#[inline(always)]
pub fn half_angle(alpha: f64) -> HalfAngle {
    let k = round_nearest(alpha * INV_TWO_PI);
    let w = (0.5 * alpha - k * PI_A) - k * PI_B;
    let below = if w < 0.0 { 1.0 } else { 0.0 };
    HalfAngle {
        s: sin_poly(w),
        c: cos_poly(w),
        turn_floor: k - below,
    }
}

/// `(sin θ, cos θ)` through the same deterministic kernel.
#[inline]
pub fn sin_cos(theta: f64) -> (f64, f64) {
    let h = half_angle(theta);
    (h.sin(), h.cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_libm_over_wide_range() {
        let mut worst: f64 = 0.0;
        for i in 0..200_000 {
            let a = (i as f64 - 100_000.0) * 0.137_7;
            let h = half_angle(a);
            worst = worst.max((h.sin() - a.sin()).abs());
            worst = worst.max((h.cos_minus_one() - (a.cos() - 1.0)).abs());
        }
        assert!(worst < 1e-11, "worst {worst}");
    }

    #[test]
    fn turn_floor_is_floor() {
        for &a in &[0.0, 1e-12, -1e-12, 2.0 * PI - 1e-9, 2.0 * PI + 1e-9, 7.0, -7.0, 1e4] {
            assert_eq!(half_angle(a).turn_floor, (a / (2.0 * PI)).floor(), "alpha {a}");
        }
        // The double nearest 2π lies just below 2π, so it is still in turn zero.
        assert_eq!(half_angle(2.0 * PI).turn_floor, 0.0);
        assert_eq!(half_angle(-2.0 * PI).turn_floor, -1.0);
    }

    #[test]
    fn half_angle_identities() {
        for i in 0..10_000 {
            let a = (i as f64) * 0.917 - 4000.0;
            let h = half_angle(a);
            let norm = h.cos_minus_one().powi(2) + h.sin().powi(2);
            assert!((norm - 4.0 * h.sin_half_sq()).abs() < 1e-12);
        }
    }
}
