//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the whole pipeline is generic over: `f32` for coding, `f64`
/// for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn erf(self) -> Self;
    fn erfc(self) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Standard normal CDF.
    #[inline]
    fn normal_cdf(self) -> Self {
        Self::of(0.5) * (-self * Self::of(std::f64::consts::FRAC_1_SQRT_2)).erfc()
    }

    /// Standard normal density.
    #[inline]
    fn normal_pdf(self) -> Self {
        (-(self * self) * Self::of(0.5)).exp() * Self::of(0.398_942_280_401_432_7)
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    #[inline]
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    #[inline]
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
}

/// Round half away from zero.
#[inline]
pub fn round_half_away<S: Scalar>(v: S) -> S {
    // `Float::round` already rounds half-way cases away from zero.
    v.round()
}
