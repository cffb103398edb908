//! Fixed-width lane arrays and condition masks.
//!
//! The kinetics kernels are written once against the [`Real`] trait and
//! instantiated either for plain `f64` (one point, ordinary branches) or for
//! [`Lanes<N>`] (a batch of `N` points with mask blending). Every lane
//! operation is the plain `f64` operation applied per lane, so the lane path
//! rounds exactly like the scalar path. The per-lane loops are small, fixed
//! trip count and branch free, which is what the auto-vectorizer wants.

use std::ops::{Add, BitAnd, BitOr, Div, Index, IndexMut, Mul, Neg, Not, Sub};

use crate::fastmath;

/// Outcome of inspecting a condition mask before evaluating a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dispatch {
    /// Every lane needs the expression.
    All,
    /// No lane needs the expression; it can be skipped.
    None,
    /// Evaluate on all lanes, keep the result where the mask is set.
    Some,
}

/// Kernel stage whose lane evaluations can be tallied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    /// Logistic rate, equilibrium fraction and branch conditions.
    RateSetup,
    /// Shared stable alpha power of the formation laws.
    Prefactor,
    BetaToAlphaS,
    MartensiteToAlphaS,
    AlphaSToBeta,
    /// Liquid fraction, clamps, equilibrium fraction, beta residual.
    CorrectionBase,
    Regularize,
    Dissolve,
    Form,
    Cap,
    /// Closed-form seed update.
    Seed,
    /// Forward Euler update of both fractions.
    EulerUpdate,
    /// Residual, weights and norm of one fixed-point iteration.
    FixedPointIteration,
}

/// Receives one call per evaluated kernel stage with the number of lanes
/// it was evaluated on. The unit type ignores everything.
pub trait Tally {
    fn record(&mut self, op: Op, lanes: usize);
}

impl Tally for () {
    #[inline(always)]
    fn record(&mut self, _op: Op, _lanes: usize) {}
}

/// Boolean lane mask.
pub trait LaneMask: Copy + BitAnd<Output = Self> + BitOr<Output = Self> + Not<Output = Self> {
    fn splat(value: bool) -> Self;
    fn dispatch(self) -> Dispatch;

    #[inline(always)]
    fn none(self) -> bool {
        self.dispatch() == Dispatch::None
    }

    #[inline(always)]
    fn all(self) -> bool {
        self.dispatch() == Dispatch::All
    }
}

/// Arithmetic surface shared by scalars and lane arrays.
pub trait Real:
    Copy
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    type Mask: LaneMask;
    const LANES: usize;

    fn splat(value: f64) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn abs(self) -> Self;
    fn lt(self, other: Self) -> Self::Mask;
    fn gt(self, other: Self) -> Self::Mask;
    fn le(self, other: Self) -> Self::Mask;
    fn select(mask: Self::Mask, if_true: Self, if_false: Self) -> Self;
    fn fast_exp(self) -> Self;
    fn fast_ln(self) -> Self;
    fn fast_pow(self, exponent: Self) -> Self;
}

impl LaneMask for bool {
    #[inline(always)]
    fn splat(value: bool) -> Self {
        value
    }

    #[inline(always)]
    fn dispatch(self) -> Dispatch {
        if self {
            Dispatch::All
        } else {
            Dispatch::None
        }
    }
}

impl Real for f64 {
    type Mask = bool;
    const LANES: usize = 1;

    #[inline(always)]
    fn splat(value: f64) -> Self {
        value
    }
    #[inline(always)]
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    #[inline(always)]
    fn min(self, other: Self) -> Self {
        f64::min(self, other)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn lt(self, other: Self) -> bool {
        self < other
    }
    #[inline(always)]
    fn gt(self, other: Self) -> bool {
        self > other
    }
    #[inline(always)]
    fn le(self, other: Self) -> bool {
        self <= other
    }
    #[inline(always)]
    fn select(mask: bool, if_true: Self, if_false: Self) -> Self {
        if mask {
            if_true
        } else {
            if_false
        }
    }
    #[inline(always)]
    fn fast_exp(self) -> Self {
        fastmath::fast_exp(self)
    }
    #[inline(always)]
    fn fast_ln(self) -> Self {
        fastmath::fast_ln(self)
    }
    #[inline(always)]
    fn fast_pow(self, exponent: Self) -> Self {
        fastmath::fast_pow(self, exponent)
    }
}

/// `N` doubles processed in lockstep.
#[derive(Clone, Copy, Debug, PartialEq)]
#[repr(C, align(64))]
pub struct Lanes<const N: usize>(pub [f64; N]);

/// Per-lane condition mask for [`Lanes<N>`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mask<const N: usize>(pub [bool; N]);

impl<const N: usize> Lanes<N> {
    #[inline(always)]
    pub fn from_slice(values: &[f64]) -> Self {
        let mut out = [0.0; N];
        out.copy_from_slice(&values[..N]);
        Self(out)
    }

    #[inline(always)]
    fn map(self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = f(self.0[i]);
        }
        Self(out)
    }

    #[inline(always)]
    fn zip(self, other: Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = f(self.0[i], other.0[i]);
        }
        Self(out)
    }

    #[inline(always)]
    fn cmp(self, other: Self, f: impl Fn(f64, f64) -> bool) -> Mask<N> {
        let mut out = [false; N];
        for i in 0..N {
            out[i] = f(self.0[i], other.0[i]);
        }
        Mask(out)
    }
}

impl<const N: usize> Index<usize> for Lanes<N> {
    type Output = f64;
    #[inline(always)]
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl<const N: usize> IndexMut<usize> for Lanes<N> {
    #[inline(always)]
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

macro_rules! lane_binop {
    ($trait:ident, $method:ident, $op:tt) => {
        impl<const N: usize> $trait for Lanes<N> {
            type Output = Self;
            #[inline(always)]
            fn $method(self, rhs: Self) -> Self {
                self.zip(rhs, |a, b| a $op b)
            }
        }
    };
}

lane_binop!(Add, add, +);
lane_binop!(Sub, sub, -);
lane_binop!(Mul, mul, *);
lane_binop!(Div, div, /);

impl<const N: usize> Neg for Lanes<N> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        self.map(|a| -a)
    }
}

impl<const N: usize> BitAnd for Mask<N> {
    type Output = Self;
    #[inline(always)]
    fn bitand(self, rhs: Self) -> Self {
        let mut out = [false; N];
        for i in 0..N {
            out[i] = self.0[i] & rhs.0[i];
        }
        Mask(out)
    }
}

impl<const N: usize> BitOr for Mask<N> {
    type Output = Self;
    #[inline(always)]
    fn bitor(self, rhs: Self) -> Self {
        let mut out = [false; N];
        for i in 0..N {
            out[i] = self.0[i] | rhs.0[i];
        }
        Mask(out)
    }
}

impl<const N: usize> Not for Mask<N> {
    type Output = Self;
    #[inline(always)]
    fn not(self) -> Self {
        let mut out = [false; N];
        for i in 0..N {
            out[i] = !self.0[i];
        }
        Mask(out)
    }
}

impl<const N: usize> LaneMask for Mask<N> {
    #[inline(always)]
    fn splat(value: bool) -> Self {
        Mask([value; N])
    }

    #[inline(always)]
    fn dispatch(self) -> Dispatch {
        branch_dispatch(&self.0)
    }
}

impl<const N: usize> Real for Lanes<N> {
    type Mask = Mask<N>;
    const LANES: usize = N;

    #[inline(always)]
    fn splat(value: f64) -> Self {
        Lanes([value; N])
    }
    #[inline(always)]
    fn max(self, other: Self) -> Self {
        self.zip(other, f64::max)
    }
    #[inline(always)]
    fn min(self, other: Self) -> Self {
        self.zip(other, f64::min)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        self.map(f64::abs)
    }
    #[inline(always)]
    fn lt(self, other: Self) -> Mask<N> {
        self.cmp(other, |a, b| a < b)
    }
    #[inline(always)]
    fn gt(self, other: Self) -> Mask<N> {
        self.cmp(other, |a, b| a > b)
    }
    #[inline(always)]
    fn le(self, other: Self) -> Mask<N> {
        self.cmp(other, |a, b| a <= b)
    }
    #[inline(always)]
    fn select(mask: Mask<N>, if_true: Self, if_false: Self) -> Self {
        blend(mask, if_true, if_false)
    }
    #[inline(always)]
    fn fast_exp(self) -> Self {
        fastmath::batch_exp(self)
    }
    #[inline(always)]
    fn fast_ln(self) -> Self {
        fastmath::batch_ln(self)
    }
    #[inline(always)]
    fn fast_pow(self, exponent: Self) -> Self {
        fastmath::batch_pow(self, exponent)
    }
}

/// Lane `i` of the result is `a[i]` where `mask[i]` is set, else `b[i]`.
#[inline(always)]
pub fn blend<const N: usize>(mask: Mask<N>, a: Lanes<N>, b: Lanes<N>) -> Lanes<N> {
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = if mask.0[i] { a.0[i] } else { b.0[i] };
    }
    Lanes(out)
}

/// Classify a mask into the all / none / some scenarios.
#[inline(always)]
pub fn branch_dispatch(mask: &[bool]) -> Dispatch {
    let set = mask.iter().filter(|&&m| m).count();
    if set == mask.len() {
        Dispatch::All
    } else if set == 0 {
        Dispatch::None
    } else {
        Dispatch::Some
    }
}
