//! Labelled samples drawn from a compactly supported input measure, plus the
//! affine readout `g(z) = w·z + b`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Affine measuring function `g(z) = w·z + b`; `∇g = w` is constant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffineReadout {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl AffineReadout {
    pub fn new(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if !(norm(&weights) > 0.0) || !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("readout weights must be finite with |w| > 0".into()));
        }
        Ok(Self { weights, bias })
    }

    #[inline]
    pub fn eval(&self, z: &[f64]) -> f64 {
        dot(&self.weights, z) + self.bias
    }

    #[inline]
    pub fn grad(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Dataset {
    d: usize,
    samples: Vec<f64>,
    labels: Vec<f64>,
    readout: AffineReadout,
    r_mu: f64,
}

impl Dataset {
    /// `samples` is row-major `n × d`.
    pub fn new(d: usize, samples: Vec<f64>, labels: Vec<f64>, readout: AffineReadout, r_mu: f64) -> Result<Self> {
        if d == 0 || !samples.len().is_multiple_of(d) {
            return Err(Error::ShapeMismatch(format!("{} sample values is not a multiple of d = {d}", samples.len())));
        }
        let n = samples.len() / d;
        if n == 0 {
            return Err(Error::InvalidArgument("dataset must be nonempty".into()));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} samples but {} labels", labels.len())));
        }
        if readout.weights.len() != d {
            return Err(Error::ShapeMismatch(format!("readout has {} weights, d = {d}", readout.weights.len())));
        }
        if !(r_mu > 0.0) {
            return Err(Error::InvalidArgument(format!("R_mu must be positive, got {r_mu}")));
        }
        if samples.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("samples and labels must be finite".into()));
        }
        for (i, x) in samples.chunks(d).enumerate() {
            if norm(x) > r_mu {
                return Err(Error::InvalidArgument(format!("sample {i} has |x| = {} > R_mu = {r_mu}", norm(x))));
            }
        }
        Ok(Self { d, samples, labels, readout, r_mu })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn r_mu(&self) -> f64 {
        self.r_mu
    }
    pub fn readout(&self) -> &AffineReadout {
        &self.readout
    }
    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.d..(i + 1) * self.d]
    }
    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }
    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Same inputs and readout with new labels.
    pub fn with_labels(&self, labels: Vec<f64>) -> Result<Self> {
        Self::new(self.d, self.samples.clone(), labels, self.readout.clone(), self.r_mu)
    }
}

/// Half squared mismatch, averaged over samples in index order.
pub(crate) fn mean_half_sq(residuals: &[f64]) -> f64 {
    let total: f64 = residuals.iter().map(|r| 0.5 * r * r).sum();
    total / residuals.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn readout() -> AffineReadout {
        AffineReadout::new(vec![1.0, 0.0], 0.0).unwrap()
    }

    #[test]
    fn rejects_points_outside_support() {
        let err = Dataset::new(2, vec![0.5, 0.5, 2.0, 0.0], vec![0.0, 0.0], readout(), 1.0);
        assert!(err.is_err());
        assert!(Dataset::new(2, vec![0.5, 0.5, 1.0, 0.0], vec![0.0, 0.0], readout(), 1.0).is_ok());
    }

    #[test]
    fn rejects_degenerate_readout() {
        assert!(AffineReadout::new(vec![0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(Dataset::new(2, vec![], vec![], readout(), 1.0).is_err());
        assert!(Dataset::new(2, vec![0.1, 0.1], vec![0.0, 1.0], readout(), 1.0).is_err());
    }

    #[test]
    fn mean_of_half_squares() {
        assert_eq!(mean_half_sq(&[1.0, 3.0]), 2.5);
    }
}
