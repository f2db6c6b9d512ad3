use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box, the spatial window for training points, rectification
/// and accept-reject sampling. Dynamics themselves are unconstrained;
/// particles may leave the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(Error::InvalidParameter("domain dimension 0".into()));
        }
        for (a, b) in lo.iter().zip(&hi) {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::InvalidParameter(format!(
                    "domain bounds must be finite with lo < hi, got [{a}, {b}]"
                )));
            }
        }
        Ok(Domain { lo, hi })
    }

    /// Symmetric cube `[-l, l]^d`.
    pub fn cube(dim: usize, l: f64) -> Result<Self> {
        Domain::new(vec![-l; dim], vec![l; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn volume(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| b - a)
            .product()
    }

    /// Closed-box membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Box shrunk by `margin` on every face; used for particle truncation.
    pub fn shrink(&self, margin: f64) -> Result<Self> {
        if margin < 0.0 {
            return Err(Error::InvalidParameter("shrink margin < 0".into()));
        }
        Domain::new(
            self.lo.iter().map(|a| a + margin).collect(),
            self.hi.iter().map(|b| b - margin).collect(),
        )
    }

    pub fn sample_uniform(&self, n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                let u: f64 = rng.random();
                out[[i, j]] = self.lo[j] + u * (self.hi[j] - self.lo[j]);
            }
        }
        out
    }

    /// Midpoints of `per_axis^d` equal cells, with the cell weight; the
    /// midpoint-rule quadrature grid used for rectification and envelopes.
    pub fn midpoint_grid(&self, per_axis: usize) -> (Array2<f64>, f64) {
        let d = self.dim();
        let total = per_axis.pow(d as u32);
        let mut pts = Array2::zeros((total, d));
        let steps: Vec<f64> = (0..d)
            .map(|j| (self.hi[j] - self.lo[j]) / per_axis as f64)
            .collect();
        for idx in 0..total {
            let mut rem = idx;
            for j in 0..d {
                let k = rem % per_axis;
                rem /= per_axis;
                pts[[idx, j]] = self.lo[j] + (k as f64 + 0.5) * steps[j];
            }
        }
        let w = self.volume() / total as f64;
        (pts, w)
    }
}
