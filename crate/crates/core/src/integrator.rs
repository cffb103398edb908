//! Time integration of the phase kinetics.
//!
//! Two single-step schemes are provided: forward Euler followed by the
//! correction function, and Crank-Nicolson solved by fixed-point iteration.
//! Both detect the two stuck states (all beta, or saturated stable alpha with
//! residual beta) and start diffusion from a closed-form solution until the
//! rate expressions can take over.
//!
//! The step kernels are generic over [`Real`] so that the batch driver runs
//! the very same arithmetic on lane arrays.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::{
    apply_corrections_g, compute_rates_g, diffusion_rate_g, pos_pow, x_alpha_eq_g, KineticsParams, PhaseState,
    ALPHA_MAX,
};
use crate::simd::{LaneMask, Op, Real, Tally};

/// Componentwise tolerance used to recognise stuck states.
pub const STUCK_TOLERANCE: f64 = 1e-14;
/// Upper bound of the normalised seeding fraction.
const XI_MAX: f64 = 1.0 - 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Explicit,
    CrankNicolson,
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "explicit" => Ok(Scheme::Explicit),
            "crank_nicolson" | "crank-nicolson" | "cn" => Ok(Scheme::CrankNicolson),
            other => Err(format!("unknown scheme `{other}` (expected explicit or crank_nicolson)")),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Explicit => "explicit",
            Scheme::CrankNicolson => "crank_nicolson",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Largest kinetics substep (s).
    pub dt_sub_max: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_fixed_point_iters: usize,
    /// Seeding stops once `seed * dt` exceeds this value.
    pub initiation_threshold: f64,
    /// Number of times a non-converging implicit step may be halved.
    pub max_halvings: u32,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Explicit,
            dt_sub_max: 0.01,
            eps_abs: 1e-10,
            eps_rel: 1e-3,
            max_fixed_point_iters: 50,
            initiation_threshold: 1e-15,
            max_halvings: 5,
        }
    }
}

impl IntegratorConfig {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self { scheme, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt_sub_max > 0.0) {
            return Err("dt_sub_max must be positive".into());
        }
        if !(self.eps_abs > 0.0) || !(self.eps_rel > 0.0) {
            return Err("eps_abs and eps_rel must be positive".into());
        }
        if self.max_fixed_point_iters == 0 {
            return Err("max_fixed_point_iters must be at least 1".into());
        }
        if !(self.initiation_threshold > 0.0) {
            return Err("initiation_threshold must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedDirection {
    /// Dissolution of saturated stable alpha.
    AlphaToBeta,
    /// Formation of stable alpha from pure beta.
    BetaToAlpha,
}

/// Closed-form seeding progress of one point.
///
/// For [`SeedDirection::AlphaToBeta`], `shifted` is the beta fraction above
/// its 0.1 floor; for [`SeedDirection::BetaToAlpha`] it is the stable alpha
/// fraction. The value is tracked on its own and never absorbed into the
/// phase state until seeding hands over.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedingState {
    pub shifted: f64,
    pub active: bool,
    pub direction: SeedDirection,
}

impl Default for SeedingState {
    fn default() -> Self {
        Self { shifted: 0.0, active: false, direction: SeedDirection::AlphaToBeta }
    }
}

impl SeedingState {
    /// Compact form stored by the batch driver: zero when inactive.
    pub fn raw(&self) -> f64 {
        if self.active {
            self.shifted
        } else {
            0.0
        }
    }

    fn from_raw(raw: f64, direction: Option<SeedDirection>) -> Self {
        match direction {
            Some(direction) if raw > 0.0 => Self { shifted: raw, active: true, direction },
            _ => Self::default(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum IntegratorError {
    #[error("fixed-point iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64, last: PhaseState },
    #[error("implicit step failed after {halvings} halvings (dt = {dt:e} s, residual {residual:e})")]
    HalvingsExhausted { halvings: u32, dt: f64, residual: f64, last: PhaseState },
}

/// Converged Crank-Nicolson step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrankNicolsonStep {
    pub state: PhaseState,
    pub seeding: SeedingState,
    pub iterations: usize,
    pub residual: f64,
}

/// Weighted norm of a residual, `(1/N) sum (a_j w_j)^2` with
/// `w_j = 1 / (eps_abs + |ref_j| eps_rel)`. No square root is taken.
pub fn wrms_norm(residual: &[f64], reference: &[f64], config: &IntegratorConfig) -> f64 {
    assert_eq!(residual.len(), reference.len());
    assert!(!residual.is_empty());
    let sum: f64 = residual
        .iter()
        .zip(reference)
        .map(|(&a, &r)| {
            let w = 1.0 / (config.eps_abs + r.abs() * config.eps_rel);
            (a * w) * (a * w)
        })
        .sum();
    sum / residual.len() as f64
}

/// Integrated and persisted per-point quantities.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Point<R> {
    pub s: R,
    pub m: R,
    pub b: R,
    pub seed: R,
}

pub(crate) struct SeedPlan<R: Real> {
    /// Lanes sitting in a stuck state with a driving force.
    pub active: R::Mask,
    pub forming: R::Mask,
    /// Lanes whose seed is large enough to enter the rate equations.
    pub handoff: R::Mask,
    pub seed: R,
    /// Stable alpha fraction written on handoff.
    pub handoff_s: R,
}

#[inline(always)]
fn near<R: Real>(value: R, target: f64) -> R::Mask {
    (value - R::splat(target)).abs().lt(R::splat(STUCK_TOLERANCE))
}

#[inline(always)]
pub(crate) fn eligible_g<R: Real>(s: R, m: R) -> (R::Mask, R::Mask) {
    let m_zero = near(m, 0.0);
    (near(s, 0.0) & m_zero, near(s, ALPHA_MAX) & m_zero)
}

/// Advance the closed-form seed over `dt` at temperature `t`.
#[inline(always)]
pub(crate) fn plan_seeding_g<R: Real>(
    s: R,
    m: R,
    seed: R,
    t: R,
    dt: f64,
    p: &KineticsParams,
    cfg: &IntegratorConfig,
    tally: &mut impl Tally,
) -> SeedPlan<R> {
    let zero = R::splat(0.0);
    let (beta_shape, alpha_shape) = eligible_g(s, m);
    let early_out = |active| SeedPlan { active, forming: active, handoff: active, seed: zero, handoff_s: s };
    if (beta_shape | alpha_shape).none() {
        return early_out(R::Mask::splat(false));
    }
    let x_eq = x_alpha_eq_g(t, p);
    let forming = beta_shape & x_eq.gt(s + m);
    let dissolving = alpha_shape & x_eq.lt(R::splat(ALPHA_MAX));
    let active = forming | dissolving;
    if active.none() {
        return early_out(active);
    }
    tally.record(Op::Seed, R::LANES);

    let (k_alpha_s, k_beta) = diffusion_rate_g(t, p);
    let target = R::select(forming, x_eq, R::splat(ALPHA_MAX) - x_eq);
    let k = R::select(forming, k_alpha_s, k_beta);
    let c = R::select(forming, R::splat(p.c_alpha_s), R::splat(p.c_beta));
    let safe_target = R::select(target.gt(zero), target, R::splat(1.0));

    let xi = (seed / safe_target).max(zero).min(R::splat(XI_MAX));
    let root = pos_pow(xi / (R::splat(1.0) - xi), R::splat(1.0) / c);
    let u = (target * k * R::splat(dt) + c * root) / c;
    let w = pos_pow(u, c);
    let next = R::select(active, target * w / (R::splat(1.0) + w), zero);

    let handoff =
        active & (next * R::splat(dt)).gt(R::splat(cfg.initiation_threshold)) & next.gt(R::splat(STUCK_TOLERANCE));
    let handoff_s = R::select(forming, next, R::splat(ALPHA_MAX) - next);
    SeedPlan {
        active,
        forming,
        handoff,
        seed: R::select(active & !handoff, next, zero),
        handoff_s: R::select(handoff, handoff_s, s),
    }
}

/// Merge the seeding plan into an ODE result.
#[inline(always)]
fn finish_step<R: Real>(
    ode: (R, R, R),
    plan: &SeedPlan<R>,
    m_n: R,
    t_np1: R,
    p: &KineticsParams,
    tally: &mut impl Tally,
) -> Point<R> {
    let (mut s, mut m, mut b) = ode;
    if !plan.handoff.none() {
        let (hs, hm, hb) = apply_corrections_g(plan.handoff_s, m_n, t_np1, p, tally);
        s = R::select(plan.handoff, hs, s);
        m = R::select(plan.handoff, hm, m);
        b = R::select(plan.handoff, hb, b);
    }
    let mut seed = plan.seed;
    if !plan.active.none() {
        let (beta_shape, alpha_shape) = eligible_g(s, m);
        let keep = (plan.forming & beta_shape) | (!plan.forming & alpha_shape);
        seed = R::select(keep, seed, R::splat(0.0));
    }
    Point { s, m, b, seed }
}

#[inline(always)]
pub(crate) fn step_explicit_g<R: Real>(
    x: Point<R>,
    t_n: R,
    t_np1: R,
    dt: f64,
    p: &KineticsParams,
    cfg: &IntegratorConfig,
    tally: &mut impl Tally,
) -> Point<R> {
    let t_mid = (t_n + t_np1) * R::splat(0.5);
    let plan = plan_seeding_g(x.s, x.m, x.seed, t_mid, dt, p, cfg, tally);
    let (ds, dm) = compute_rates_g(x.s, x.m, t_n, p, tally);
    let h = R::splat(dt);
    tally.record(Op::EulerUpdate, R::LANES);
    let ode = apply_corrections_g(x.s + h * ds, x.m + h * dm, t_np1, p, tally);
    finish_step(ode, &plan, x.m, t_np1, p, tally)
}

/// Outcome of the lane-wise fixed-point loop.
pub(crate) struct CnLanes<R: Real> {
    pub point: Point<R>,
    pub converged: R::Mask,
    pub iterations: R,
    pub residual: R,
}

/// Fixed-point Crank-Nicolson step. Converged lanes are frozen, so every
/// lane follows exactly the iteration sequence of a scalar run.
#[inline(always)]
pub(crate) fn step_cn_g<R: Real>(
    x: Point<R>,
    t_n: R,
    t_np1: R,
    dt: f64,
    p: &KineticsParams,
    cfg: &IntegratorConfig,
    tally: &mut impl Tally,
    mut observe: impl FnMut(R),
) -> CnLanes<R> {
    let t_mid = (t_n + t_np1) * R::splat(0.5);
    let plan = plan_seeding_g(x.s, x.m, x.seed, t_mid, dt, p, cfg, tally);
    let half = R::splat(0.5 * dt);
    let (rs_n, rm_n) = compute_rates_g(x.s, x.m, t_n, p, tally);

    let (mut s, mut m, mut b) = apply_corrections_g(x.s, x.m, t_np1, p, tally);
    let (mut rs, mut rm) = compute_rates_g(s, m, t_np1, p, tally);
    let mut converged = R::Mask::splat(false);
    let mut iterations = R::splat(0.0);
    let mut residual = R::splat(f64::INFINITY);

    for _ in 0..cfg.max_fixed_point_iters {
        tally.record(Op::FixedPointIteration, R::LANES);
        let (s1, m1, b1) = apply_corrections_g(x.s + half * (rs + rs_n), x.m + half * (rm + rm_n), t_np1, p, tally);
        let (rs1, rm1) = compute_rates_g(s1, m1, t_np1, p, tally);
        let as_ = half * (rs1 - rs);
        let am = half * (rm1 - rm);
        let ws = R::splat(1.0) / (R::splat(cfg.eps_abs) + s1.abs() * R::splat(cfg.eps_rel));
        let wm = R::splat(1.0) / (R::splat(cfg.eps_abs) + m1.abs() * R::splat(cfg.eps_rel));
        let wrms = ((as_ * ws) * (as_ * ws) + (am * wm) * (am * wm)) * R::splat(0.5);
        observe(wrms);

        let live = !converged;
        s = R::select(live, s1, s);
        m = R::select(live, m1, m);
        b = R::select(live, b1, b);
        rs = R::select(live, rs1, rs);
        rm = R::select(live, rm1, rm);
        residual = R::select(live, wrms, residual);
        iterations = R::select(live, iterations + R::splat(1.0), iterations);
        converged = converged | wrms.lt(R::splat(1.0));
        if converged.all() {
            break;
        }
    }
    // the residual is the distance to the next iterate, so take that one
    if !converged.none() {
        let (s1, m1, b1) = apply_corrections_g(x.s + half * (rs + rs_n), x.m + half * (rm + rm_n), t_np1, p, tally);
        s = R::select(converged, s1, s);
        m = R::select(converged, m1, m);
        b = R::select(converged, b1, b);
    }

    let point = finish_step((s, m, b), &plan, x.m, t_np1, p, tally);
    CnLanes { point, converged, iterations, residual }
}

#[inline(always)]
fn to_point(state: &PhaseState, seeding: &SeedingState) -> Point<f64> {
    Point { s: state.x_alpha_s, m: state.x_alpha_m, b: state.x_beta, seed: seeding.raw() }
}

#[inline(always)]
fn from_point(point: Point<f64>) -> (PhaseState, SeedingState) {
    let state = PhaseState::new(point.s, point.m, point.b);
    let direction = match eligible_g(point.s, point.m) {
        (true, _) => Some(SeedDirection::BetaToAlpha),
        (_, true) => Some(SeedDirection::AlphaToBeta),
        _ => None,
    };
    (state, SeedingState::from_raw(point.seed, direction))
}

/// Forward Euler step of the diffusion rates at `t_n`, corrected at `t_np1`.
pub fn step_explicit(
    state: &PhaseState,
    seeding: &SeedingState,
    t_n: f64,
    t_np1: f64,
    dt: f64,
    params: &KineticsParams,
    config: &IntegratorConfig,
) -> (PhaseState, SeedingState) {
    from_point(step_explicit_g(to_point(state, seeding), t_n, t_np1, dt, params, config, &mut ()))
}

/// Crank-Nicolson step solved by fixed-point iteration.
pub fn step_crank_nicolson(
    state: &PhaseState,
    seeding: &SeedingState,
    t_n: f64,
    t_np1: f64,
    dt: f64,
    params: &KineticsParams,
    config: &IntegratorConfig,
) -> Result<CrankNicolsonStep, IntegratorError> {
    crank_nicolson_traced(state, seeding, t_n, t_np1, dt, params, config, |_| {})
}

/// As [`step_crank_nicolson`], reporting the residual norm of every iteration.
#[allow(clippy::too_many_arguments)]
pub fn crank_nicolson_traced(
    state: &PhaseState,
    seeding: &SeedingState,
    t_n: f64,
    t_np1: f64,
    dt: f64,
    params: &KineticsParams,
    config: &IntegratorConfig,
    observe: impl FnMut(f64),
) -> Result<CrankNicolsonStep, IntegratorError> {
    let out = step_cn_g(to_point(state, seeding), t_n, t_np1, dt, params, config, &mut (), observe);
    let (state, seeding) = from_point(out.point);
    if out.converged {
        Ok(CrankNicolsonStep { state, seeding, iterations: out.iterations as usize, residual: out.residual })
    } else {
        Err(IntegratorError::NotConverged { iterations: out.iterations as usize, residual: out.residual, last: state })
    }
}

/// Advance the closed-form seed alone, without the rate equations.
///
/// Returns the state unchanged while seeding continues, or the corrected
/// state with the seed written into it once the seed hands over.
pub fn initiate_diffusion(
    state: &PhaseState,
    t: f64,
    dt: f64,
    seeding: &SeedingState,
    params: &KineticsParams,
    config: &IntegratorConfig,
) -> (PhaseState, SeedingState) {
    let x = to_point(state, seeding);
    let plan = plan_seeding_g(x.s, x.m, x.seed, t, dt, params, config, &mut ());
    let (state, _) = from_point(finish_step((x.s, x.m, x.b), &plan, x.m, t, params, &mut ()));
    let direction =
        plan.active.then_some(if plan.forming { SeedDirection::BetaToAlpha } else { SeedDirection::AlphaToBeta });
    (state, SeedingState::from_raw(plan.seed, direction))
}

/// Closed-form seeded fraction after time `t` from zero at constant temperature.
///
/// Evaluated with the standard library functions; serves as a reference for
/// the seeding path and for constant-temperature trajectories.
pub fn analytic_beta_growth(direction: SeedDirection, t_kelvin: f64, t: f64, params: &KineticsParams) -> f64 {
    let k_alpha_s = params.k1 / (1.0 + (-params.k3 * (t_kelvin - params.k2)).exp());
    let x_eq = if t_kelvin < params.t_alpha_s_end {
        ALPHA_MAX
    } else if t_kelvin > params.t_alpha_s_start {
        0.0
    } else {
        1.0 - (-params.k_alpha_eq * (params.t_alpha_s_start - t_kelvin)).exp()
    };
    let (target, k, c) = match direction {
        SeedDirection::AlphaToBeta => (ALPHA_MAX - x_eq, params.f * k_alpha_s, params.c_beta),
        SeedDirection::BetaToAlpha => (x_eq, k_alpha_s, params.c_alpha_s),
    };
    let w = (target * k * t / c).powf(c);
    target * w / (1.0 + w)
}

/// Number of equal substeps used for a macro step.
pub fn substep_count(dt_macro: f64, config: &IntegratorConfig) -> usize {
    if dt_macro > config.dt_sub_max {
        ((dt_macro / config.dt_sub_max) - 1e-9).ceil().max(1.0) as usize
    } else {
        1
    }
}

/// Temperature at substep boundary `j` of `n`.
#[inline(always)]
pub(crate) fn interpolate<R: Real>(t_n: R, t_np1: R, j: usize, n: usize) -> R {
    if j == 0 {
        t_n
    } else if j == n {
        t_np1
    } else {
        t_n + (t_np1 - t_n) * R::splat(j as f64 / n as f64)
    }
}

/// One implicit substep with halving retries.
#[allow(clippy::too_many_arguments)]
pub(crate) fn robust_cn_scalar(
    x: Point<f64>,
    t_n: f64,
    t_np1: f64,
    dt: f64,
    p: &KineticsParams,
    cfg: &IntegratorConfig,
    depth: u32,
    tally: &mut impl Tally,
) -> Result<Point<f64>, IntegratorError> {
    let out = step_cn_g(x, t_n, t_np1, dt, p, cfg, tally, |_| {});
    if out.converged {
        return Ok(out.point);
    }
    if depth >= cfg.max_halvings {
        return Err(IntegratorError::HalvingsExhausted {
            halvings: depth,
            dt,
            residual: out.residual,
            last: PhaseState::new(out.point.s, out.point.m, out.point.b),
        });
    }
    let t_mid = 0.5 * (t_n + t_np1);
    let half = robust_cn_scalar(x, t_n, t_mid, 0.5 * dt, p, cfg, depth + 1, tally)?;
    robust_cn_scalar(half, t_mid, t_np1, 0.5 * dt, p, cfg, depth + 1, tally)
}

pub(crate) fn integrate_point(
    mut x: Point<f64>,
    t_n: f64,
    t_np1: f64,
    dt_macro: f64,
    p: &KineticsParams,
    cfg: &IntegratorConfig,
) -> Result<Point<f64>, IntegratorError> {
    let n = substep_count(dt_macro, cfg);
    let dt = dt_macro / n as f64;
    for j in 0..n {
        let ta = interpolate(t_n, t_np1, j, n);
        let tb = interpolate(t_n, t_np1, j + 1, n);
        x = match cfg.scheme {
            Scheme::Explicit => step_explicit_g(x, ta, tb, dt, p, cfg, &mut ()),
            Scheme::CrankNicolson => robust_cn_scalar(x, ta, tb, dt, p, cfg, 0, &mut ())?,
        };
    }
    Ok(x)
}

/// Advance one point over a macro step with subcycling and linear
/// temperature interpolation.
pub fn integrate_interval(
    state: &PhaseState,
    seeding: &SeedingState,
    t_n: f64,
    t_np1: f64,
    dt_macro: f64,
    params: &KineticsParams,
    config: &IntegratorConfig,
) -> Result<(PhaseState, SeedingState), IntegratorError> {
    integrate_point(to_point(state, seeding), t_n, t_np1, dt_macro, params, config).map(from_point)
}

/// Integrates a single point along a prescribed temperature history.
#[derive(Clone, Debug)]
pub struct PointIntegrator {
    pub state: PhaseState,
    pub seeding: SeedingState,
    pub params: KineticsParams,
    pub config: IntegratorConfig,
}

impl PointIntegrator {
    pub fn new(state: PhaseState, params: KineticsParams, config: IntegratorConfig) -> Self {
        Self { state, seeding: SeedingState::default(), params, config }
    }

    pub fn advance(&mut self, t_n: f64, t_np1: f64, dt: f64) -> Result<PhaseState, IntegratorError> {
        let (state, seeding) =
            integrate_interval(&self.state, &self.seeding, t_n, t_np1, dt, &self.params, &self.config)?;
        self.state = state;
        self.seeding = seeding;
        Ok(state)
    }
}
