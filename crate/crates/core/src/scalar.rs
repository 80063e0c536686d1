use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::Float;

/// Floating-point element type of tensors. Training runs in `f32`;
/// gradient checks run in `f64`.
pub trait Scalar: Float + Debug + Display + Default + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
