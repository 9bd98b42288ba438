//! Branch-free elementary functions for the hot loops.
//!
//! Cody–Waite reduction by `ln 2` and a degree-13 Taylor polynomial on
//! `|r| ≤ ln2/2`; within a few ulp of libm but free of calls and branches,
//! so loops over them vectorize. Inputs below −700 saturate (`e^z` flushes
//! to about 1e-304) and NaN propagates.

/// `(2^k, e^r − 1)` with `z = k·ln2 + r`, `|r| ≤ ln2/2`.
#[inline(always)]
fn reduce(z: f64) -> (f64, f64) {
    const SHIFT: f64 = 6755399441055744.0; // 1.5·2^52, rounds to integer
    #[allow(clippy::excessive_precision)]
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    #[allow(clippy::excessive_precision)]
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const COEFFS: [f64; 13] = [
        1.0 / 6_227_020_800.0,
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
    ];
    // keeps 2^k a normal number
    let z = z.max(-700.0).min(709.0);
    let shifted = z * std::f64::consts::LOG2_E + SHIFT;
    let k = shifted - SHIFT;
    let r = (z - k * LN2_HI) - k * LN2_LO;
    let mut p = COEFFS[0];
    for c in &COEFFS[1..] {
        p = p * r + c;
    }
    // the low mantissa bits of `shifted` hold k in two's complement
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    (scale, p * r)
}

/// Largest argument whose exponential is finite.
const OVERFLOW: f64 = 709.782_712_893_384;

/// `e^z − 1`.
#[inline(always)]
pub fn expm1(z: f64) -> f64 {
    let (scale, em1_r) = reduce(z);
    let out = scale * em1_r + (scale - 1.0);
    if z.is_nan() || z > OVERFLOW {
        z * f64::INFINITY
    } else {
        out
    }
}

/// `e^z`.
#[inline(always)]
pub fn exp(z: f64) -> f64 {
    let (scale, em1_r) = reduce(z);
    let out = scale * em1_r + scale;
    if z.is_nan() || z > OVERFLOW {
        z * f64::INFINITY
    } else {
        out
    }
}

/// `ln(1 + y)` for `y ∈ [0, 1]`, as `2·atanh(y / (2 + y))`.
#[inline(always)]
pub fn ln_1p_unit(y: f64) -> f64 {
    let s = y / (2.0 + y);
    let s2 = s * s;
    // odd series of atanh; s² ≤ 1/9 so 18 terms reach full precision
    const COEFFS: [f64; 18] = [
        1.0 / 35.0,
        1.0 / 33.0,
        1.0 / 31.0,
        1.0 / 29.0,
        1.0 / 27.0,
        1.0 / 25.0,
        1.0 / 23.0,
        1.0 / 21.0,
        1.0 / 19.0,
        1.0 / 17.0,
        1.0 / 15.0,
        1.0 / 13.0,
        1.0 / 11.0,
        1.0 / 9.0,
        1.0 / 7.0,
        1.0 / 5.0,
        1.0 / 3.0,
        1.0,
    ];
    let mut p = 1.0 / 37.0;
    for c in COEFFS {
        p = p * s2 + c;
    }
    2.0 * s * p
}

/// Defines a function that runs `$body` compiled for AVX2 when the CPU
/// supports it, and the portable build otherwise. Rust never contracts
/// floating-point expressions, so both builds produce identical bits.
macro_rules! avx2_dispatch {
    ($(#[$m:meta])* $vis:vis fn $name:ident$(<$lt:lifetime>)?($($arg:ident : $ty:ty),* $(,)?) -> $ret:ty => $body:path) => {
        $(#[$m])*
        $vis fn $name$(<$lt>)?($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide$(<$lt>)?($($arg: $ty),*) -> $ret {
                    $body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the required CPU feature was detected above
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}
pub(crate) use avx2_dispatch;
