//! Scalar abstraction so the whole stack can run in `f32` or `f64`.

use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Element type of every tensor in the crate.
///
/// The two impls (`f32`, `f64`) must stay behaviourally identical up to
/// rounding: no per-type algorithm switches, or the precision modes drift
/// apart in ways tolerance checks cannot explain.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Display + Debug + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or intermediate.
    fn lit(v: f64) -> Self;

    /// Widening conversion; exact for both impls.
    fn as_f64(self) -> f64;

    /// Gauss error function, needed by the exact GELU.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Round to nearest, ties to even. Used wherever a real-valued width is
/// converted to a unit count so that every caller agrees on the result.
/// (Not provided by `core`, hence hand-rolled on top of libm.)
#[inline]
pub fn round_half_even(v: f64) -> f64 {
    let base = libm::floor(v);
    let frac = v - base;
    if frac > 0.5 {
        base + 1.0
    } else if frac < 0.5 {
        base
    } else if libm::fmod(base, 2.0) == 0.0 {
        base
    } else {
        base + 1.0
    }
}
