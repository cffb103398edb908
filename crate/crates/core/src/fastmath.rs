//! Fast `exp`, `ln` and real powers by direct IEEE-754 bit synthesis.
//!
//! A double is `2^(p - 1023) * (1 + m)` with an 11 bit exponent `p` and a 52
//! bit mantissa `m`. For `exp(x) = 2^y` the integer part of `y` is the
//! exponent and `2^frac(y) - 1` the mantissa; the latter is written as
//! `frac(y) - K_exp(frac(y))` where `K_exp` is a least-squares polynomial, so
//! the bit pattern becomes `trunc(2^52 * (y - K_exp(frac(y))) + 1023 * 2^52)`.
//! `ln` runs the same layout backwards with `K_ln(m) ~ log2(1 + m)`.
//!
//! Accuracy (checked by the sweep tests): relative error below `1e-6` for
//! `exp` on `[-708, 709]`, below `1e-6` for `ln` away from 1 and absolute
//! error below `1e-9` close to 1, and below `1e-5` for `pow` on the window
//! the kinetics model uses. None of the functions branch on their argument.

use crate::simd::Lanes;

/// Least-squares correction polynomial with coefficients in ascending order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolyCorrection {
    pub coefficients: &'static [f64],
}

impl PolyCorrection {
    pub const fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }
}

/// `K_exp(y) ~ 1 + y - 2^y` on `[0, 1)`.
pub const K_EXP: PolyCorrection = PolyCorrection {
    coefficients: &[
        1.213071811889e-10,
        3.068528102657e-1,
        -2.40226342399359e-1,
        -5.55053313414954e-2,
        -9.6135243288483e-3,
        -1.34288475963084e-3,
        -1.43131744483589e-4,
        -2.1595656126349e-5,
    ],
};

/// `K_ln(m) ~ log2(1 + m)` on `[0, 1)`.
pub const K_LN: PolyCorrection = PolyCorrection {
    coefficients: &[
        1.84775672096293e-10,
        1.44269504084132,
        -0.721347520143005,
        0.480898345526187,
        -0.360675000332004,
        0.288048466919235,
        -0.235306287368882,
        0.183102904829435,
        -0.1209962689793,
        0.0591503811592113,
        -0.0181149492489989,
        0.00254488675605743,
    ],
};

/// Layout constants of the 64-bit IEEE-754 format and the clamping window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FastMathConstants {
    pub bias: i64,
    pub mantissa_scale: f64,
    pub log2_e: f64,
    pub ln_2: f64,
    pub exp_arg_min: f64,
    pub exp_arg_max: f64,
}

pub const CONSTANTS: FastMathConstants = FastMathConstants {
    bias: 1023,
    mantissa_scale: 4_503_599_627_370_496.0, // 2^52
    log2_e: std::f64::consts::LOG2_E,
    ln_2: std::f64::consts::LN_2,
    exp_arg_min: -708.0,
    exp_arg_max: 709.0,
};

const MANTISSA_BITS: u32 = 52;
const MANTISSA_MASK: u64 = (1 << MANTISSA_BITS) - 1;
const ONE_BITS: u64 = 0x3ff0_0000_0000_0000;
const EXP_OFFSET: f64 = CONSTANTS.mantissa_scale * CONSTANTS.bias as f64;

/// Evaluate `coeffs` at `y` with Estrin's scheme.
///
/// Neighbouring coefficients are paired into `c[2i+1] * y + c[2i]`, then
/// the pairs are combined with `y^2`, `y^4`, ... until one term is left.
/// Each pairing is one fused multiply-add. For degree 7 this is exactly
/// `((a7 y + a6) y^2 + (a5 y + a4)) y^4 + ((a3 y + a2) y^2 + (a1 y + a0))`.
pub fn estrin_eval(coeffs: &PolyCorrection, y: f64) -> f64 {
    let c = coeffs.coefficients;
    assert!(!c.is_empty() && c.len() <= 32, "unsupported polynomial length");
    let mut terms = [0.0; 32];
    terms[..c.len()].copy_from_slice(c);
    let mut len = c.len();
    let mut power = y;
    while len > 1 {
        for i in 0..len / 2 {
            terms[i] = terms[2 * i + 1].mul_add(power, terms[2 * i]);
        }
        if len % 2 == 1 {
            terms[len / 2] = terms[len - 1];
        }
        len = len.div_ceil(2);
        power *= power;
    }
    terms[0]
}

#[inline(always)]
fn k_exp(y: f64) -> f64 {
    let a = K_EXP.coefficients;
    let y2 = y * y;
    let y4 = y2 * y2;
    let p0 = a[1].mul_add(y, a[0]);
    let p1 = a[3].mul_add(y, a[2]);
    let p2 = a[5].mul_add(y, a[4]);
    let p3 = a[7].mul_add(y, a[6]);
    let q0 = p1.mul_add(y2, p0);
    let q1 = p3.mul_add(y2, p2);
    q1.mul_add(y4, q0)
}

#[inline(always)]
fn k_ln(y: f64) -> f64 {
    let b = K_LN.coefficients;
    let y2 = y * y;
    let y4 = y2 * y2;
    let y8 = y4 * y4;
    let p0 = b[1].mul_add(y, b[0]);
    let p1 = b[3].mul_add(y, b[2]);
    let p2 = b[5].mul_add(y, b[4]);
    let p3 = b[7].mul_add(y, b[6]);
    let p4 = b[9].mul_add(y, b[8]);
    let p5 = b[11].mul_add(y, b[10]);
    let q0 = p1.mul_add(y2, p0);
    let q1 = p3.mul_add(y2, p2);
    let q2 = p5.mul_add(y2, p4);
    let r0 = q1.mul_add(y4, q0);
    q2.mul_add(y8, r0)
}

/// Approximate `e^x`.
///
/// Arguments below `-708` give `0`, above `709` give `f64::MAX`, NaN stays NaN.
#[inline(always)]
pub fn fast_exp(x: f64) -> f64 {
    let clamped = x.max(CONSTANTS.exp_arg_min).min(CONSTANTS.exp_arg_max);
    let y = clamped * CONSTANTS.log2_e;
    // floor, not truncation: the fractional part must be in [0, 1) for x < 0.
    let frac = y - y.floor();
    let bits = CONSTANTS.mantissa_scale.mul_add(y - k_exp(frac), EXP_OFFSET) as i64;
    let z = f64::from_bits(bits as u64);
    let z = if x < CONSTANTS.exp_arg_min { 0.0 } else { z };
    let z = if x > CONSTANTS.exp_arg_max { f64::MAX } else { z };
    if x.is_nan() {
        f64::NAN
    } else {
        z
    }
}

/// Approximate `ln(x)`; NaN for `x <= 0`.
#[inline(always)]
pub fn fast_ln(x: f64) -> f64 {
    // Subnormals are flushed to the smallest normal so the exponent and
    // mantissa fields decompose as `2^(p - b) * (1 + m)`.
    let normal = x.max(f64::MIN_POSITIVE);
    let bits = normal.to_bits();
    let exponent = ((bits >> MANTISSA_BITS) as i64 - CONSTANTS.bias) as f64;
    let mantissa = f64::from_bits((bits & MANTISSA_MASK) | ONE_BITS) - 1.0;
    let z = CONSTANTS.ln_2 * (exponent + k_ln(mantissa));
    let z = if x == f64::INFINITY { f64::INFINITY } else { z };
    if x > 0.0 {
        z
    } else {
        f64::NAN
    }
}

/// Approximate `base^exponent` as `exp(exponent * ln(base))`.
///
/// Only defined for `base > 0`; other bases yield NaN, so callers clamp first.
#[inline(always)]
pub fn fast_pow(base: f64, exponent: f64) -> f64 {
    fast_exp(exponent * fast_ln(base))
}

#[inline(always)]
pub fn batch_exp<const N: usize>(x: Lanes<N>) -> Lanes<N> {
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = fast_exp(x.0[i]);
    }
    Lanes(out)
}

#[inline(always)]
pub fn batch_ln<const N: usize>(x: Lanes<N>) -> Lanes<N> {
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = fast_ln(x.0[i]);
    }
    Lanes(out)
}

#[inline(always)]
pub fn batch_pow<const N: usize>(base: Lanes<N>, exponent: Lanes<N>) -> Lanes<N> {
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = fast_pow(base.0[i], exponent.0[i]);
    }
    Lanes(out)
}

/// Function selector for accuracy sweeps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ApproxFn {
    Exp,
    Ln,
    /// `x^exponent` swept over the base.
    Pow {
        exponent: f64,
    },
}

/// How sample points are distributed over the sweep range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    Logarithmic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub x: f64,
    pub exact: f64,
    pub approx: f64,
    pub rel_err: f64,
}

/// Relative error with the convention `0/0 = 0`.
pub fn relative_error(approx: f64, exact: f64) -> f64 {
    let diff = (approx - exact).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / exact.abs()
    }
}

/// Compare an approximation against the standard library over `[lo, hi]`.
///
/// Logarithmic spacing needs `0 < lo`.
pub fn error_sweep(func: ApproxFn, lo: f64, hi: f64, samples: usize, spacing: Spacing) -> Vec<SweepRow> {
    let samples = samples.max(2);
    (0..samples)
        .map(|i| {
            let t = i as f64 / (samples - 1) as f64;
            let x = match spacing {
                Spacing::Linear => lo + (hi - lo) * t,
                Spacing::Logarithmic => (lo.ln() + (hi.ln() - lo.ln()) * t).exp(),
            };
            let (exact, approx) = match func {
                ApproxFn::Exp => (x.exp(), fast_exp(x)),
                ApproxFn::Ln => (x.ln(), fast_ln(x)),
                ApproxFn::Pow { exponent } => (x.powf(exponent), fast_pow(x, exponent)),
            };
            SweepRow { x, exact, approx, rel_err: relative_error(approx, exact) }
        })
        .collect()
}
