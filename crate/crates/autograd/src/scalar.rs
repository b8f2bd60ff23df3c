use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (training and inference) and `f64` (gradient checks).
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Number of bits in the representation, used in checkpoint headers.
    const BITS: u32;

    fn erf(self) -> Self;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Float for f32 {
    const BITS: u32 = 32;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    const BITS: u32 = 64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting an `f64` literal into the element type.
#[inline]
pub fn lit<T: Float>(v: f64) -> T {
    T::from_f64(v)
}
