//! Scalar abstraction shared by the tensor, model and quantization code.
//!
//! Model math is written once over [`Scalar`] and instantiated for `f32` and
//! `f64`. Every dot product and reduction accumulates in `f64` regardless of
//! the storage type, so an `f32` model differs from its `f64` twin only by
//! storage rounding.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.as_f64() * y.as_f64();
    }
    acc
}

pub fn norm2<T: Scalar>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// Pairwise (tree) summation. Rounding error grows with `log n` instead of `n`,
/// which keeps sums stable under permutation of the inputs.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Elementwise pairwise reduction of equally sized vectors.
pub fn pairwise_sum_vectors(parts: &[Vec<f64>]) -> Vec<f64> {
    match parts.len() {
        0 => Vec::new(),
        1 => parts[0].clone(),
        n => {
            let mid = n / 2;
            let mut left = pairwise_sum_vectors(&parts[..mid]);
            let right = pairwise_sum_vectors(&parts[mid..]);
            for (l, r) in left.iter_mut().zip(&right) {
                *l += r;
            }
            left
        }
    }
}

/// Round an `f64` to the nearest `f32` that is `<=` it.
pub fn f32_round_down(v: f64) -> f32 {
    let r = v as f32;
    if (r as f64) > v {
        r.next_down()
    } else {
        r
    }
}

/// Round an `f64` to the nearest `f32` that is `>=` it.
pub fn f32_round_up(v: f64) -> f32 {
    let r = v as f32;
    if (r as f64) < v {
        r.next_up()
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let v = [1.0, 2.0, 3.0, 4.5];
        assert_eq!(pairwise_sum(&v), 10.5);
    }

    #[test]
    fn pairwise_is_stable_under_reversal() {
        let v: Vec<f64> = (0..1000).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let mut r = v.clone();
        r.reverse();
        let a = pairwise_sum(&v);
        let b = pairwise_sum(&r);
        assert!(((a - b) / a).abs() < 1e-14);
    }

    #[test]
    fn directed_f32_rounding_brackets_value() {
        let v = 0.1f64;
        assert!((f32_round_down(v) as f64) <= v);
        assert!((f32_round_up(v) as f64) >= v);
        assert_eq!(f32_round_down(0.5), 0.5);
        assert_eq!(f32_round_up(0.5), 0.5);
    }
}
