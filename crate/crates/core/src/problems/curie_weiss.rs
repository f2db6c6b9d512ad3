//! Scalar double-well dynamics with mean-field coupling through the
//! expectation: `dX = (-beta (X^3 - X) + beta K E[X]) dt + dB`.
//!
//! The long-time law is the explicit invariant density
//! `p*(x) = exp(-2 beta (x^4/4 - x^2/2)) / C`. The expectation is estimated
//! once per time node by averaging a fixed number of samples drawn from the
//! current density model.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{gaussian_init, ProblemSpec};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::NoiseKind;
use crate::quad::midpoint;
use crate::sde::{Dynamics, NodeCtx, SigmaBatch};

/// Samples drawn from the model per node to estimate the expectation.
pub const MEAN_SAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CwParams {
    pub beta: f64,
    /// Coupling strength of the expectation term (distinct from batch size).
    pub coupling: f64,
}

impl Default for CwParams {
    fn default() -> Self {
        CwParams {
            beta: 1.0,
            coupling: -0.1,
        }
    }
}

/// Drift at a point given the current mean estimate.
#[inline]
pub fn cw_drift(x: f64, mean_estimate: f64, p: CwParams) -> f64 {
    -p.beta * (x * x * x - x) + p.beta * p.coupling * mean_estimate
}

/// Unnormalized invariant density `exp(-2 beta (x^4/4 - x^2/2))`.
#[inline]
pub fn invariant_unnormalized(x: f64, beta: f64) -> f64 {
    (-2.0 * beta * (x * x * x * x / 4.0 - x * x / 2.0)).exp()
}

/// Normalizer of the invariant density by dense quadrature on [-6, 6]
/// (the integrand decays like exp(-x^4/2); the truncation error is far below
/// the quadrature resolution).
pub fn invariant_normalizer(beta: f64) -> f64 {
    midpoint(-6.0, 6.0, 1_000_000, |x| invariant_unnormalized(x, beta))
}

/// Normalized invariant density p*.
pub fn invariant_density(xs: &ArrayView2<f64>, p: CwParams) -> Array1<f64> {
    let c = invariant_normalizer(p.beta);
    Array1::from_iter(
        xs.rows()
            .into_iter()
            .map(|r| invariant_unnormalized(r[0], p.beta) / c),
    )
}

pub fn build(p: CwParams, domain: Domain, grid: TimeGrid) -> Result<ProblemSpec> {
    if domain.dim() != 1 {
        return Err(Error::InvalidParameter(
            "double-well mean-field dynamics is one-dimensional".into(),
        ));
    }
    let drift = move |_t: f64,
                      _off: usize,
                      x: &ArrayView2<f64>,
                      _law: &dyn crate::density::LawFlow,
                      ctx: &NodeCtx|
          -> Result<Array2<f64>> {
        let mean = ctx
            .mean
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("missing mean estimate".into()))?;
        let m = mean[0];
        if !m.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mean estimate is not finite: {m}"
            )));
        }
        let mut b = Array2::zeros((x.nrows(), 1));
        for i in 0..x.nrows() {
            b[[i, 0]] = cw_drift(x[[i, 0]], m, p);
        }
        Ok(b)
    };
    let dynamics = Dynamics {
        drift: Box::new(drift),
        sigma: Box::new(|_t, x, _law, _ctx| {
            Ok(SigmaBatch::Scalar(Array1::from_elem(x.nrows(), 1.0)))
        }),
        prepare_node: Some(Box::new(|law, t, rng| {
            Ok(NodeCtx {
                cloud: None,
                mean: Some(law.mean(t, MEAN_SAMPLES, rng)?),
            })
        })),
    };
    Ok(ProblemSpec {
        name: "double_well_mean_field".into(),
        domain,
        grid,
        noise_kind: NoiseKind::Brownian,
        dynamics,
        init: gaussian_init(vec![1.0], 1.0),
        reference: None,
    })
}
