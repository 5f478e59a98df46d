//! Scalar abstraction shared by every numeric module.
//!
//! All tensor math is written against [`Scalar`]; the crate root exposes
//! `f64` aliases because training and gradient checking want double
//! precision. `f32` works for inference and quick experiments.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of tensors, parameters and metrics.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Send + Sync + 'static
{
}
#[cfg(test)]
mod tests {
    use super::*;
    use f128::f128;

    #[test]
    fn literals_survive_conversion() {
        for x in [3e-8, -1.5, 1e-12, 0.7] {
            assert_eq!(f128::lit(x).as_f64(), x);
            assert_eq!(f32::lit(x), x as f32);
        }
    }
}
