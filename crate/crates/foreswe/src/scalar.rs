//! Scalar abstraction for the numeric core.
//!
//! Math modules are written against [`Scalar`] so the same kernels run in
//! `f32` or `f64`. The trait is a bound alias: any float type providing the
//! `num_traits` surface below gets the implementation for free.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::float::Float;
use num_traits::{FromPrimitive, NumAssign};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar: Float + FromPrimitive + NumAssign + Sum + Debug + Display + 'static {
    /// Lossy conversion from `f64`, used for literals inside generic code.
    fn from_real(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal must convert into scalar type")
    }

    /// Lossy conversion to `f64`, used for reporting and serialization.
    fn to_real(self) -> f64;
}

impl<T> Scalar for T
where
    T: Float + FromPrimitive + NumAssign + Sum + Debug + Display + 'static,
{
    fn to_real(self) -> f64 {
        self.to_f64().expect("scalar must convert into f64")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_generic<T: Scalar>(values: &[T]) -> T {
        values.iter().copied().sum()
    }

    #[test]
    fn works_for_both_float_widths() {
        assert_eq!(sum_generic(&[1.0f32, 2.0, 3.0]), 6.0f32);
        assert_eq!(sum_generic(&[1.0f64, 2.0, 3.0]), 6.0f64);
        assert_eq!(f32::from_real(0.5), 0.5f32);
        assert_eq!(2.5f64.to_real(), 2.5);
    }
}
