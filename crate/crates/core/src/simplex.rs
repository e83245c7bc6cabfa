//! Helpers for vectors constrained to the probability simplex.

use crate::error::{Error, Result};

/// Tolerance used when checking that a weight vector sums to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Checks that `v` is nonnegative, finite, and sums to one within [`SIMPLEX_TOL`].
pub fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    if let Some(neg) = v.iter().find(|&&x| x < 0.0) {
        return Err(Error::invalid(format!("{what} has a negative entry ({neg})")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotOnSimplex { what: what.to_string(), sum });
    }
    Ok(())
}

/// Euclidean projection onto the probability simplex (sort-based, O(n log n)).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Clips negatives to zero and rescales to unit sum. Falls back to uniform
/// when nothing positive remains.
pub fn renormalize(v: &mut [f64]) {
    let mut sum = 0.0;
    for x in v.iter_mut() {
        if *x < 0.0 || !x.is_finite() {
            *x = 0.0;
        }
        sum += *x;
    }
    if sum > 0.0 {
        v.iter_mut().for_each(|x| *x /= sum);
    } else {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
    }
}

pub fn one_hot(len: usize, idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[idx] = 1.0;
    v
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projection_keeps_simplex_points() {
        let v = [0.2, 0.3, 0.5];
        let p = project_simplex(&v);
        for (a, b) in v.iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(project_simplex(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn projection_of_far_point_is_vertex() {
        assert_eq!(project_simplex(&[5.0, 0.0, -1.0]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn check_simplex_rejects() {
        assert!(check_simplex(&[0.5, 0.6], "w").is_err());
        assert!(check_simplex(&[1.2, -0.2], "w").is_err());
        assert!(check_simplex(&[f64::NAN, 1.0], "w").is_err());
        assert!(check_simplex(&[], "w").is_err());
        assert!(check_simplex(&[0.25, 0.75], "w").is_ok());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex(v in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
            let p = project_simplex(&v);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
