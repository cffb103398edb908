//! Pointwise phase-fraction model for Ti-6Al-4V.
//!
//! Three phases are tracked per material point: stable alpha (`x_alpha_s`),
//! martensitic alpha (`x_alpha_m`) and beta (`x_beta`). Beta is never
//! integrated; it is recovered from `x_alpha_s + x_alpha_m + x_beta = 1 - g(T)`.
//!
//! All formulas are written once, generically over [`Real`], and used both
//! for single points (`f64`) and lane batches. The `f64` entry points below
//! are thin wrappers.

use serde::{Deserialize, Serialize};

use crate::simd::{LaneMask, Op, Real, Tally};

/// Upper bound of the alpha fractions.
pub const ALPHA_MAX: f64 = 0.9;
/// Smallest base handed to `fast_pow`.
pub const MIN_POW_BASE: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticsParams {
    /// Liquidus temperature (K).
    pub t_liquidus: f64,
    /// Solidus temperature (K).
    pub t_solidus: f64,
    pub t_alpha_s_start: f64,
    pub t_alpha_s_end: f64,
    pub t_alpha_m_start: f64,
    /// Ambient temperature, lower end of the martensite ramp (K).
    pub t_ambient: f64,
    /// Equilibrium constant of stable alpha (1/K).
    pub k_alpha_eq: f64,
    /// Equilibrium constant of martensite (1/K).
    pub k_alpha_m_eq: f64,
    pub c_alpha_s: f64,
    pub c_beta: f64,
    /// Asymptotic diffusion rate (1/s).
    pub k1: f64,
    /// Logistic midpoint (K).
    pub k2: f64,
    /// Logistic steepness (1/K).
    pub k3: f64,
    /// Ratio of the dissolution to the formation rate.
    pub f: f64,
    /// Width of the stable alpha regularization ramp above its start temperature (K).
    pub t_alpha_s_reg: f64,
}

impl Default for KineticsParams {
    fn default() -> Self {
        Self {
            t_liquidus: 1928.0,
            t_solidus: 1878.0,
            t_alpha_s_start: 1273.0,
            t_alpha_s_end: 935.0,
            t_alpha_m_start: 848.0,
            t_ambient: 293.0,
            k_alpha_eq: 0.0068,
            k_alpha_m_eq: 0.00415,
            c_alpha_s: 2.51,
            c_beta: 11.0,
            k1: 0.294,
            k2: 850.0,
            k3: 0.0337,
            f: 3.8,
            t_alpha_s_reg: 100.0,
        }
    }
}

impl KineticsParams {
    /// Exponents `((c-1)/c, (c+1)/c)` of the stable alpha formation laws.
    pub fn alpha_s_exponents(&self) -> (f64, f64) {
        let c = self.c_alpha_s;
        ((c - 1.0) / c, (c + 1.0) / c)
    }

    /// Exponents `((c-1)/c, (c+1)/c)` of the stable alpha dissolution law.
    pub fn beta_exponents(&self) -> (f64, f64) {
        let c = self.c_beta;
        ((c - 1.0) / c, (c + 1.0) / c)
    }
}

/// Phase fractions at one material point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub x_alpha_s: f64,
    pub x_alpha_m: f64,
    pub x_beta: f64,
}

impl PhaseState {
    pub const fn new(x_alpha_s: f64, x_alpha_m: f64, x_beta: f64) -> Self {
        Self { x_alpha_s, x_alpha_m, x_beta }
    }

    /// Freshly solidified material: all beta.
    pub const fn fresh_beta() -> Self {
        Self::new(0.0, 0.0, 1.0)
    }

    /// Annealed alpha + beta feedstock.
    pub const fn annealed() -> Self {
        Self::new(ALPHA_MAX, 0.0, 0.1)
    }

    pub fn x_alpha(&self) -> f64 {
        self.x_alpha_s + self.x_alpha_m
    }

    pub fn total(&self) -> f64 {
        self.x_alpha_s + self.x_alpha_m + self.x_beta
    }
}

/// Diffusion-driven rates of the two integrated fractions (1/s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseRates {
    pub d_x_alpha_s: f64,
    pub d_x_alpha_m: f64,
}

#[inline(always)]
pub(crate) fn liquid_fraction_g<R: Real>(t: R, p: &KineticsParams) -> R {
    let ramp = (t - R::splat(p.t_solidus)) / R::splat(p.t_liquidus - p.t_solidus);
    R::select(t.lt(R::splat(p.t_solidus)), R::splat(0.0), R::select(t.gt(R::splat(p.t_liquidus)), R::splat(1.0), ramp))
}

#[inline(always)]
pub(crate) fn x_alpha_eq_g<R: Real>(t: R, p: &KineticsParams) -> R {
    let ramp = R::splat(1.0) - (-(R::splat(p.k_alpha_eq) * (R::splat(p.t_alpha_s_start) - t))).fast_exp();
    R::select(
        t.lt(R::splat(p.t_alpha_s_end)),
        R::splat(ALPHA_MAX),
        R::select(t.gt(R::splat(p.t_alpha_s_start)), R::splat(0.0), ramp),
    )
}

#[inline(always)]
pub(crate) fn x_alpha_m0_eq_g<R: Real>(t: R, p: &KineticsParams) -> R {
    let ramp = (R::splat(1.0) - (-(R::splat(p.k_alpha_m_eq) * (R::splat(p.t_alpha_m_start) - t))).fast_exp())
        .min(R::splat(ALPHA_MAX));
    R::select(
        t.lt(R::splat(p.t_ambient)),
        R::splat(ALPHA_MAX),
        R::select(t.gt(R::splat(p.t_alpha_m_start)), R::splat(0.0), ramp),
    )
}

#[inline(always)]
pub(crate) fn x_alpha_m_eq_g<R: Real>(t: R, x_alpha_s: R, p: &KineticsParams) -> R {
    let scale = ((R::splat(ALPHA_MAX) - x_alpha_s) / R::splat(ALPHA_MAX)).max(R::splat(0.0));
    x_alpha_m0_eq_g(t, p) * scale
}

#[inline(always)]
pub(crate) fn diffusion_rate_g<R: Real>(t: R, p: &KineticsParams) -> (R, R) {
    let k_alpha_s = R::splat(p.k1) / (R::splat(1.0) + (-(R::splat(p.k3) * (t - R::splat(p.k2)))).fast_exp());
    (k_alpha_s, R::splat(p.f) * k_alpha_s)
}

/// `base^e` for `base > 0`, exactly zero otherwise.
#[inline(always)]
pub(crate) fn pos_pow<R: Real>(base: R, exponent: R) -> R {
    let value = base.max(R::splat(MIN_POW_BASE)).fast_pow(exponent);
    R::select(base.gt(R::splat(0.0)), value, R::splat(0.0))
}

/// Diffusion rates `(d x_alpha_s, d x_alpha_m)`.
///
/// Each transformation branch is skipped when no lane satisfies its
/// condition and blended with zero otherwise.
#[inline(always)]
pub(crate) fn compute_rates_g<R: Real>(s: R, m: R, t: R, p: &KineticsParams, tally: &mut impl Tally) -> (R, R) {
    let zero = R::splat(0.0);
    tally.record(Op::RateSetup, R::LANES);
    let x_alpha = s + m;
    let (k_alpha_s, k_beta) = diffusion_rate_g(t, p);
    let x_eq = x_alpha_eq_g(t, p);
    let (as_lo, as_hi) = p.alpha_s_exponents();

    let forming = x_alpha.lt(x_eq);
    let from_martensite = m.gt(zero);
    let dissolving = x_alpha.gt(x_eq);

    let prefactor = if (forming | from_martensite).none() {
        zero
    } else {
        tally.record(Op::Prefactor, R::LANES);
        k_alpha_s * pos_pow(s, R::splat(as_lo))
    };

    // beta -> alpha_s
    let beta_to_alpha_s = if forming.none() {
        zero
    } else {
        tally.record(Op::BetaToAlphaS, R::LANES);
        R::select(forming, prefactor * pos_pow(x_eq - x_alpha, R::splat(as_hi)), zero)
    };

    // alpha_m -> alpha_s
    let martensite_to_alpha_s = if from_martensite.none() {
        zero
    } else {
        tally.record(Op::MartensiteToAlphaS, R::LANES);
        R::select(from_martensite, prefactor * pos_pow(m, R::splat(as_hi)), zero)
    };

    // alpha_s -> beta
    let alpha_s_to_beta = if dissolving.none() {
        zero
    } else {
        tally.record(Op::AlphaSToBeta, R::LANES);
        let (b_lo, b_hi) = p.beta_exponents();
        let rate =
            k_beta * pos_pow(R::splat(ALPHA_MAX) - x_alpha, R::splat(b_lo)) * pos_pow(x_alpha - x_eq, R::splat(b_hi));
        R::select(dissolving, rate, zero)
    };

    (beta_to_alpha_s + martensite_to_alpha_s - alpha_s_to_beta, -martensite_to_alpha_s)
}

/// Instantaneous transformations and constraint projection.
///
/// Order: clamp negatives, stable alpha regularization above its start
/// temperature, martensite dissolution, martensite formation, alpha cap,
/// beta from continuity.
#[inline(always)]
pub(crate) fn apply_corrections_g<R: Real>(s: R, m: R, t: R, p: &KineticsParams, tally: &mut impl Tally) -> (R, R, R) {
    let zero = R::splat(0.0);
    tally.record(Op::CorrectionBase, R::LANES);
    let x_sol = R::splat(1.0) - liquid_fraction_g(t, p);
    let mut s = s.max(zero);
    let mut m = m.max(zero);

    let regularize = t.gt(R::splat(p.t_alpha_s_start));
    if !regularize.none() {
        tally.record(Op::Regularize, R::LANES);
        let ramp = ((R::splat(p.t_alpha_s_start + p.t_alpha_s_reg) - t) / R::splat(p.t_alpha_s_reg)).max(zero);
        s = R::select(regularize, s.min(R::splat(ALPHA_MAX) * ramp), s);
    }

    let x_eq = x_alpha_eq_g(t, p);
    let dissolve = (s + m).gt(x_eq);
    if !dissolve.none() {
        tally.record(Op::Dissolve, R::LANES);
        m = R::select(dissolve, (x_eq - s).max(zero), m);
    }

    let form = t.lt(R::splat(p.t_alpha_m_start));
    if !form.none() {
        tally.record(Op::Form, R::LANES);
        m = R::select(form, m.max(x_alpha_m_eq_g(t, s, p)), m);
    }

    let cap = x_sol.min(R::splat(ALPHA_MAX));
    let x_alpha = s + m;
    let over = x_alpha.gt(cap);
    if !over.none() {
        tally.record(Op::Cap, R::LANES);
        let factor = cap / x_alpha;
        s = R::select(over, s * factor, s);
        m = R::select(over, m * factor, m);
    }

    let beta = (x_sol - s - m).max(zero);
    (s, m, beta)
}

/// Liquid fraction `g(T)`: 0 below the solidus, 1 above the liquidus, linear between.
pub fn liquid_fraction(t: f64, params: &KineticsParams) -> f64 {
    liquid_fraction_g(t, params)
}

/// Equilibrium stable alpha fraction (Koistinen-Marburger law).
pub fn x_alpha_eq(t: f64, params: &KineticsParams) -> f64 {
    x_alpha_eq_g(t, params)
}

/// Unscaled martensite pseudo-equilibrium, capped at 0.9.
pub fn x_alpha_m0_eq(t: f64, params: &KineticsParams) -> f64 {
    x_alpha_m0_eq_g(t, params)
}

/// Martensite pseudo-equilibrium reduced by the stable alpha already present.
pub fn x_alpha_m_eq(t: f64, x_alpha_s: f64, params: &KineticsParams) -> f64 {
    x_alpha_m_eq_g(t, x_alpha_s, params)
}

/// Logistic diffusion rates `(k_alpha_s, k_beta)` in 1/s.
pub fn diffusion_rate_k(t: f64, params: &KineticsParams) -> (f64, f64) {
    diffusion_rate_g(t, params)
}

pub fn compute_rates(state: &PhaseState, t: f64, params: &KineticsParams) -> PhaseRates {
    let (d_x_alpha_s, d_x_alpha_m) = compute_rates_g(state.x_alpha_s, state.x_alpha_m, t, params, &mut ());
    PhaseRates { d_x_alpha_s, d_x_alpha_m }
}

pub fn apply_corrections(state: &PhaseState, t: f64, params: &KineticsParams) -> PhaseState {
    let (s, m, b) = apply_corrections_g(state.x_alpha_s, state.x_alpha_m, t, params, &mut ());
    PhaseState::new(s, m, b)
}
