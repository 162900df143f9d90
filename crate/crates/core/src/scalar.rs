//! Scalar abstraction for the numeric kernels.
//!
//! The learning and statistics code (forest, standardizer, detector,
//! acquisition, summary stats) is generic over [`Scalar`] so it runs on f32 or
//! f64. The pipeline itself is pinned to f64 through the aliases at the crate
//! root.

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lossy cast from an f64 constant into the working scalar type.
#[inline]
pub fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 constant representable in scalar type")
}

/// Mean of a slice. Empty input yields zero.
pub fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let sum: T = xs.iter().copied().sum();
    sum / c::<T>(xs.len() as f64)
}

/// Population standard deviation (divides by n, defined for a single sample).
pub fn population_stddev<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let m = mean(xs);
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    (ss / c::<T>(xs.len() as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_stddev() {
        assert_eq!(mean::<f64>(&[90.0, 110.0]), 100.0);
        assert_eq!(population_stddev::<f64>(&[90.0, 110.0]), 10.0);
        assert_eq!(population_stddev::<f64>(&[7.0]), 0.0);
    }

    #[test]
    fn works_on_f32() {
        let xs: Vec<f32> = vec![1.0, 2.0, 3.0];
        assert!((mean(&xs) - 2.0).abs() < 1e-6);
    }
}
