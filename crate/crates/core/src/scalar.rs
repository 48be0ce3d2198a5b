//! Floating-point abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the library is generic over (`f32` or `f64`).
///
/// Tolerances are attached to the type because a simplex check at `1e-9`
/// makes sense for `f64` but not for `f32`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Allowed deviation of `Σ aᵢ` from one for a probability vector.
    const SIMPLEX_TOL: f64;
    /// Pivot / zero threshold used by the simplex solver.
    const PIVOT_TOL: f64;

    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }

    #[inline]
    fn simplex_tol() -> Self {
        Self::lit(Self::SIMPLEX_TOL)
    }

    #[inline]
    fn pivot_tol() -> Self {
        Self::lit(Self::PIVOT_TOL)
    }
}

impl Scalar for f64 {
    const SIMPLEX_TOL: f64 = 1e-9;
    const PIVOT_TOL: f64 = 1e-11;
}

impl Scalar for f32 {
    const SIMPLEX_TOL: f64 = 1e-5;
    const PIVOT_TOL: f64 = 1e-5;
}
