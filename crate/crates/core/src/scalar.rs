//! Scalar abstraction for the numeric kernels.
//!
//! The critic network and the fine-tuning losses only need ordinary float
//! arithmetic, so they are written against this trait and instantiated at
//! `f32` or `f64`. Conversions from integer counts go through
//! `FromPrimitive`; conversions back to `f64` (for serialization and
//! reporting) through `ToPrimitive`.

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    /// Lossless-enough construction from `f64` constants.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }

    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
