use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating scalar the numerical core is generic over.
///
/// Everything the fitting and scoring paths need from a number type: IEEE float
/// semantics, ndarray interop, serde, and casts from the `f64` literals that
/// tolerances and defaults are written in. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + serde::Serialize
    + serde::de::DeserializeOwned
    + 'static
{
    /// Tolerance for "sums to one" style feasibility checks.
    fn feas_tol() -> Self;
}

impl Scalar for f64 {
    fn feas_tol() -> Self {
        1e-8
    }
}

impl Scalar for f32 {
    // f32 carries ~7 decimal digits; 1e-8 would reject exact arithmetic.
    fn feas_tol() -> Self {
        1e-4
    }
}

/// Cast an `f64` constant into the working scalar type.
///
/// Panics only if the target type cannot represent any `f64`, which does not
/// happen for the provided impls.
#[inline]
pub fn cast<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("f64 constant must convert into the working scalar")
}

/// Cast a count into the working scalar type.
#[inline]
pub(crate) fn castu<F: Scalar>(n: usize) -> F {
    F::from_usize(n).expect("usize must convert into the working scalar")
}
