//! Scalar abstraction for the numeric core.
//!
//! The dense-matrix and autodiff layers are generic over [`Scalar`] so that
//! f32 instantiations remain available for experiments; everything above the
//! numeric core runs on the crate-level [`crate::Real`] (= f64) alias.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable in matrices and compute graphs.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from usize counts (batch sizes, dims).
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
