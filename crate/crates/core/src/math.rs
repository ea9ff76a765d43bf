//! Scalar math for `no_std` builds plus small vector helpers used across the
//! crate. Transcendental functions route through `libm`.

use crate::{CoreError, Result};
use alloc::vec::Vec;

pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

pub fn round(x: f64) -> f64 {
    libm::round(x)
}

pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

/// Dot product of equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn l2_norm(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

/// Squared Euclidean distance between two slices.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity in [-1, 1]. A zero-norm argument is an error; callers
/// that want a fallback (the defenses use 0) decide at their level.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::ZeroNorm);
    }
    let s = dot(a, b) / (na * nb);
    // Rounding can push the ratio a hair outside [-1, 1].
    Ok(s.clamp(-1.0, 1.0))
}

/// Cosine similarity with zero-norm vectors mapped to 0.
pub fn cosine_or_zero(a: &[f64], b: &[f64]) -> f64 {
    match cosine_similarity(a, b) {
        Ok(s) => s,
        Err(CoreError::ZeroNorm) => 0.0,
        Err(_) => 0.0,
    }
}

/// Arithmetic mean; 0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Median over a sorted copy: the middle element for odd lengths, the mean of
/// the two middle elements for even lengths.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[(n - 1) / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// True if every entry is finite.
pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_orthogonal_is_zero() {
        let s = cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn cosine_colinear_is_one() {
        let s = cosine_similarity(&[3.0, 3.0], &[1.0, 1.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_analytic_value() {
        // ([2,0],[1,1]) -> 1/sqrt(2)
        let s = cosine_similarity(&[2.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_errors() {
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(CoreError::ZeroNorm)
        );
        assert_eq!(cosine_or_zero(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let v = [0.3, -0.7, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(median(&[0.0, 0.0, 0.0, 10.0]), 0.0);
    }
}
