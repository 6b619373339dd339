//! Scalar abstraction for the numeric core.
//!
//! Everything numeric (tensors, tapes, models, optimizers) is generic over
//! [`Scalar`] so the same code runs in `f32` for training and in `f64` for
//! finite-difference verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps, NumCast};

/// Floating-point scalar usable by the tensor engine.
pub trait Scalar:
    Float + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 -> scalar conversion")
    }

    fn from_f32(v: f32) -> Self {
        <Self as NumCast>::from(v).expect("f32 -> scalar conversion")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar -> f64 conversion")
    }

    fn as_f32(self) -> f32 {
        <f32 as NumCast>::from(self).expect("scalar -> f32 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
