//! Floating-point abstraction shared by the numeric kernels.
//!
//! Every scoring kernel (similarity, top-K aggregation, fusion, stain
//! deconvolution, rank statistics) is written once against [`Scalar`] and
//! instantiated for `f32` and `f64`. The orchestration layer fixes `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Clamp into `[lo, hi]`. NaN stays NaN.
    #[inline]
    fn clamp_to(self, lo: Self, hi: Self) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product in index order.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    let s = xs.iter().fold(T::zero(), |acc, &x| acc + x);
    Some(s / T::from_count(xs.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_and_norm() {
        assert_eq!(dot(&[1.0f64, 0.0], &[0.6, 0.8]), 0.6);
        assert!((l2_norm(&[3.0f32, 4.0]) - 5.0).abs() < 1e-6);
        assert_eq!(mean::<f64>(&[]), None);
        assert_eq!(mean(&[1.0f64, 2.0, 3.0]), Some(2.0));
    }

    #[test]
    fn clamp() {
        assert_eq!(1.5f64.clamp_to(0.0, 1.0), 1.0);
        assert_eq!((-0.5f32).clamp_to(0.0, 1.0), 0.0);
        assert!(f64::NAN.clamp_to(0.0, 1.0).is_nan());
    }
}
