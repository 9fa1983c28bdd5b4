//! Floating-point abstraction for the numeric core.
//!
//! The tensor engine is generic over [`Scalar`] so the same kernels compile
//! for f32 and f64. Everything above the engine pins itself to f64 (via the
//! default type parameter on `tensor::Tensor`): the finite-difference
//! gradient checks and the trainer's bit-exactness guarantees are only
//! meaningful at double precision.

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    /// Lossless for f64, rounds for f32. Constants flow into kernels this way.
    fn of(v: f64) -> Self;
    /// Widening (f32) or identity (f64) conversion back out.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
