use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the decision-process math is written against (f32 or f64).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `ln Σ exp(x_i)` with max-shift. Empty input or all `-inf` yields `-inf`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Weighted version: `ln Σ w_i exp(x_i)` for nonnegative weights.
pub fn weighted_log_sum_exp<T: Real>(xs: &[T], weights: &[T]) -> T {
    debug_assert_eq!(xs.len(), weights.len());
    let max = xs
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > T::zero())
        .map(|(x, _)| *x)
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() || max == T::infinity() {
        return max;
    }
    let sum: T = xs
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > T::zero())
        .map(|(&x, &w)| w * (x - max).exp())
        .sum();
    max + sum.ln()
}
