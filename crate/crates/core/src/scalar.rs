//! Scalar abstraction for the numeric stack.
//!
//! Everything differentiable (tensors, backbone, losses, optimizer) is generic
//! over [`Scalar`] so the same code path runs in f32 for training and in f64
//! for finite-difference gradient verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type of tensors and parameters: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Send + Sync + Debug + Display + 'static
{
    /// Lossy conversion from f64 (exact for f64, rounded for f32).
    fn cast_from(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to f64 (exact for both supported types).
    fn cast_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
