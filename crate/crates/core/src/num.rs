//! Scalar abstraction and rank utilities shared by the statistics code.

use std::cmp::Ordering;
use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar accepted by the generic numeric routines.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("usize is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }
}

impl<T> Real for T where T: Float + FromPrimitive + ToPrimitive + Sum + Debug + Send + Sync + 'static {}

pub(crate) fn total_cmp<T: Real>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or_else(|| a.is_nan().cmp(&b.is_nan()))
}

/// 1-based ranks with tied values sharing their average rank.
pub fn average_ranks<T: Real>(values: &[T]) -> Vec<T> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| total_cmp(&values[a], &values[b]));
    let mut ranks = vec![T::zero(); n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share ranks i+1..=j+1
        let avg = T::of((i + j) as f64 / 2.0 + 1.0);
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Signed ranks: `sign(x) * rank(|x|)` with average ranks for ties.
///
/// Zeros keep a signed rank of zero.
pub fn signed_ranks<T: Real>(values: &[T]) -> Vec<T> {
    let abs: Vec<T> = values.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    values
        .iter()
        .zip(ranks)
        .map(|(&v, r)| {
            if v > T::zero() {
                r
            } else if v < T::zero() {
                -r
            } else {
                T::zero()
            }
        })
        .collect()
}

pub fn mean<T: Real>(values: &[T]) -> T {
    if values.is_empty() {
        return T::nan();
    }
    values.iter().copied().sum::<T>() / T::of_usize(values.len())
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std<T: Real>(values: &[T]) -> T {
    let n = values.len();
    if n < 2 {
        return T::nan();
    }
    let m = mean(values);
    let ss: T = values.iter().map(|&v| (v - m) * (v - m)).sum();
    (ss / T::of_usize(n - 1)).sqrt()
}

pub fn pearson<T: Real>(x: &[T], y: &[T]) -> T {
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        sxy = sxy + (a - mx) * (b - my);
        sxx = sxx + (a - mx) * (a - mx);
        syy = syy + (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_share_average_rank() {
        let r = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn signed_ranks_keep_sign() {
        let r = signed_ranks(&[-0.5f32, 2.5, 0.5, -1.5]);
        assert_eq!(r, vec![-1.5f32, 4.0, 1.5, -3.0]);
    }

    #[test]
    fn pearson_of_identical_vectors_is_one() {
        let v = [0.1, -0.4, 2.0, 0.3];
        assert!((pearson(&v, &v) - 1.0f64).abs() < 1e-12);
    }
}
