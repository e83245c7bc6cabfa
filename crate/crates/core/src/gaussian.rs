//! Axis-aligned Gaussians and their Wasserstein-2 algebra.
//!
//! For diagonal covariances the W2 distance reduces to the Euclidean distance
//! between the stacked parameter vectors `(mu, sigma)` in `R^{2d}`:
//!
//! ```text
//! W2(a, b)^2 = |mu_a - mu_b|^2 + |sigma_a - sigma_b|^2
//! ```
//!
//! so barycenters and merges are plain weighted averages of the parameters.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::check_simplex;

/// Relative factor applied to the data spread to get the standard-deviation floor.
pub const VAR_FLOOR_REL: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A Gaussian with diagonal covariance, stored as mean and per-dimension
/// standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::Empty("gaussian mean"));
        }
        if mu.len() != sigma.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), got: sigma.len() });
        }
        if mu.iter().chain(&sigma).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        if let Some(s) = sigma.iter().find(|&&s| s <= 0.0) {
            return Err(Error::invalid(format!("standard deviation must be positive, got {s}")));
        }
        Ok(Self { mu, sigma })
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self { mu: vec![0.0; d], sigma: vec![1.0; d] }
    }

    pub(crate) fn from_parts(mu: Vec<f64>, sigma: Vec<f64>) -> Self {
        debug_assert_eq!(mu.len(), sigma.len());
        Self { mu, sigma }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub(crate) fn mu_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }

    pub(crate) fn sigma_mut(&mut self) -> &mut [f64] {
        &mut self.sigma
    }

    /// Raises every standard deviation to at least `floor[k]`.
    pub fn apply_floor(&mut self, floor: &[f64]) {
        for (s, &f) in self.sigma.iter_mut().zip(floor) {
            if !(*s >= f) {
                *s = f;
            }
        }
    }

    /// Log density at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &m), &s) in x.iter().zip(&self.mu).zip(&self.sigma) {
            let z = (xi - m) / s;
            acc += z * z + 2.0 * s.ln();
        }
        -0.5 * (acc + self.mu.len() as f64 * LN_2PI)
    }
}

/// Squared W2 distance between two axis-aligned Gaussians.
pub fn w2_diag_sq(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(w2_sq_unchecked(a, b))
}

/// W2 distance between two axis-aligned Gaussians.
pub fn w2_diag(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    w2_diag_sq(a, b).map(f64::sqrt)
}

pub(crate) fn w2_sq_unchecked(a: &DiagGaussian, b: &DiagGaussian) -> f64 {
    let dm: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let ds: f64 = a.sigma.iter().zip(&b.sigma).map(|(x, y)| (x - y) * (x - y)).sum();
    dm + ds
}

/// W2 barycenter of single Gaussians: the `lambda`-weighted average of the
/// parameters.
pub fn gaussian_barycenter(components: &[DiagGaussian], lambda: &[f64]) -> Result<DiagGaussian> {
    let first = components.first().ok_or(Error::Empty("barycenter components"))?;
    if lambda.len() != components.len() {
        return Err(Error::DimensionMismatch { expected: components.len(), got: lambda.len() });
    }
    check_simplex(lambda, "barycentric weights")?;
    let d = first.dim();
    let mut mu = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    for (c, &l) in components.iter().zip(lambda) {
        if c.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: c.dim() });
        }
        for k in 0..d {
            mu[k] += l * c.mu[k];
            sigma[k] += l * c.sigma[k];
        }
    }
    Ok(DiagGaussian { mu, sigma })
}

/// Merges two weighted components into one carrying their total mass.
pub fn gauss_merge(
    weights: (f64, f64),
    comps: (&DiagGaussian, &DiagGaussian),
) -> Result<(f64, DiagGaussian)> {
    let (wi, wj) = weights;
    if !(wi > 0.0 && wj > 0.0) {
        return Err(Error::invalid(format!("merge weights must be positive, got ({wi}, {wj})")));
    }
    if comps.0.dim() != comps.1.dim() {
        return Err(Error::DimensionMismatch { expected: comps.0.dim(), got: comps.1.dim() });
    }
    let total = wi + wj;
    let (li, lj) = (wi / total, wj / total);
    let mu = comps.0.mu.iter().zip(&comps.1.mu).map(|(a, b)| li * a + lj * b).collect();
    let sigma = comps.0.sigma.iter().zip(&comps.1.sigma).map(|(a, b)| li * a + lj * b).collect();
    Ok((total, DiagGaussian { mu, sigma }))
}

/// Per-dimension population standard deviation of the rows of `x`.
pub fn column_std(x: ArrayView2<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.columns()
        .into_iter()
        .map(|col| {
            let mean = col.sum() / n;
            (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Standard-deviation floor derived from the data spread: `VAR_FLOOR_REL`
/// times the per-dimension std, or times 1.0 where the data has no spread.
pub fn sigma_floor_from_std(std: &[f64]) -> Vec<f64> {
    std.iter()
        .map(|&s| VAR_FLOOR_REL * if s > 0.0 && s.is_finite() { s } else { 1.0 })
        .collect()
}
