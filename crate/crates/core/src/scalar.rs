//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the pipeline is generic over.
///
/// Implemented for `f32` and `f64`. The bounds cover everything the
/// numeric modules need: IEEE float semantics ([`Float`]), conversions
/// to and from `f64` for constants and file formats, and the `ndarray`
/// operand traits used by matrix products and broadcast arithmetic.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this scalar type.
    ///
    /// All random draws and literal constants go through this single
    /// conversion so that an `f32` run consumes exactly the same RNG
    /// stream as an `f64` run with the same seed.
    fn real(v: f64) -> Self;

    /// Converts this scalar to `f64` for serialization and reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn real(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn real(v: f64) -> Self {
        v
    }
}
