//! Floating-point abstraction for the numeric kernels.
//!
//! Layers and the network are generic over [`Scalar`] so the same code runs
//! in `f32` for trained models (the on-disk parameter format) and in `f64`
//! for finite-difference gradient checks.

use num_traits::Float;

pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for lifting an `f64` constant into the working scalar type.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}
