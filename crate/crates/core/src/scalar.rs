//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the numeric core is generic over (`f32`, `f64`).
///
/// Everything that carries precision guarantees in this crate is stated for
/// `f64`; `f32` instantiations work but the documented tolerances do not
/// transfer.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal, for constants baked into
    /// formulas.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant must convert")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Shorthand used all over the numeric core to lift an `f64` constant.
#[inline]
pub(crate) fn c<S: Scalar>(v: f64) -> S {
    S::from_f64_c(v)
}
