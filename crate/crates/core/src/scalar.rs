//! Scalar abstraction: the numeric element type used throughout the crate.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point scalar: `f32` or `f64`.
///
/// All numerical routines in this crate are generic over this trait; the
/// crate root exposes `f64` aliases for the common types.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Convert an `f64` constant. Panics if the value is not representable,
    /// which cannot happen for the finite literals used in this crate.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable in scalar type")
    }

    /// Convert a count to the scalar type.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable in scalar type")
    }

    /// Lossy conversion to `f64`, used at reporting boundaries.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + LinalgScalar
        + ScalarOperand
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum<T>
        + Display
        + Debug
        + Send
        + Sync
        + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_generic<T: Scalar>(xs: &[T]) -> T {
        xs.iter().copied().sum()
    }

    #[test]
    fn works_for_both_float_widths() {
        assert_eq!(sum_generic(&[1.0f32, 2.0]), 3.0);
        assert_eq!(sum_generic(&[1.0f64, 2.0]), 3.0);
        assert_eq!(f64::of(0.5), 0.5);
        assert_eq!(f32::from_count(3), 3.0);
    }
}
