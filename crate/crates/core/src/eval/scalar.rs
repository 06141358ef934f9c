use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::Num;

/// Numeric type a metric is computed in. Counting metrics work in any
/// scalar, including exact rationals; BLEU additionally needs
/// [`num_traits::Float`].
pub trait Scalar: Num + Copy + PartialOrd + Debug {
    fn from_count(n: usize) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    fn from_count(n: usize) -> Self {
        n as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_count(n: usize) -> Self {
        n as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for Ratio<i64> {
    fn from_count(n: usize) -> Self {
        Ratio::from_integer(i64::try_from(n).expect("count fits in i64"))
    }
    fn to_f64(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

/// `100 * num / den`, or zero for an empty denominator.
pub(crate) fn percent<T: Scalar>(num: usize, den: usize) -> T {
    if den == 0 {
        return T::zero();
    }
    T::from_count(100) * T::from_count(num) / T::from_count(den)
}

/// Arithmetic mean; `None` for an empty slice.
pub(crate) fn mean<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(T::zero(), |acc, &v| acc + v);
    Some(sum / T::from_count(values.len()))
}
