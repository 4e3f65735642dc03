//! Small slice kernels used by the hot paths. Kept iterator-based so the
//! compiler can elide bounds checks and vectorize.

use crate::real::{real, Real};
use crate::{Error, Result, EPS_NORM};

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub(crate) fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `acc += c * v`
pub(crate) fn axpy<T: Real>(acc: &mut [T], c: T, v: &[T]) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, x) in acc.iter_mut().zip(v) {
        *a += c * *x;
    }
}

pub(crate) fn scale<T: Real>(a: &mut [T], c: T) {
    for x in a.iter_mut() {
        *x *= c;
    }
}

/// Cosine similarity with the shared norm guard.
pub(crate) fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    let eps = real::<T>(EPS_NORM);
    if na <= eps || nb <= eps {
        return Err(Error::ZeroVector(EPS_NORM));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Softmax with max-subtraction; identical in exact arithmetic to the naive
/// exponent ratio.
pub(crate) fn softmax<T: Real>(scores: &[T]) -> Vec<T> {
    let max = scores
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, s| if s > m { s } else { m });
    let mut out: Vec<T> = scores.iter().map(|s| (*s - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for p in out.iter_mut() {
        *p = *p / total;
    }
    out
}

/// Shannon entropy of a probability vector in nats.
pub(crate) fn entropy<T: Real>(p: &[T]) -> T {
    let floor = real::<T>(EPS_NORM);
    -p.iter()
        .map(|&q| if q > floor { q * q.ln() } else { T::zero() })
        .sum::<T>()
}
