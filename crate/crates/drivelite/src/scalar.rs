//! Scalar abstraction for the dense kernels.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};

/// Floating-point scalar usable by every kernel in the crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for writing literals in generic code.
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64c(x)
}
