//! Floating-point element types accepted by tensors and models.
//!
//! Everything numeric in the crate is generic over [`Scalar`]. Training and
//! the on-disk formats use `f32`; `f64` instantiations exist so gradient
//! oracles can evaluate the same code at higher precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Literal conversion; every `f64` constant used in the crate is
    /// representable (possibly rounded) in both implementors.
    fn lit(x: f64) -> Self;

    fn to_f32_lossy(self) -> f32;

    fn to_f64_exact(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }

    #[inline]
    fn to_f64_exact(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }

    #[inline]
    fn to_f64_exact(self) -> f64 {
        self
    }
}
