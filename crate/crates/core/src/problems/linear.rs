//! Linear mean-field test dynamics: `dX = (-X + E[X]) dt + dB`.
//!
//! Both coefficients are globally Lipschitz in state and measure with
//! constant 1 (`|b(x,mu)-b(y,nu)| <= |x-y| + W2(mu,nu)`, sigma constant), so
//! the fixed-point contraction and posterior error machinery apply with a
//! known constant. Used to validate those estimators, not as a benchmark.

use ndarray::{Array1, Array2, ArrayView2};

use super::{gaussian_init, ProblemSpec};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::NoiseKind;
use crate::sde::{Dynamics, NodeCtx, SigmaBatch};

/// Joint Lipschitz constant of (b, sigma) in state and measure.
pub const C_LIP: f64 = 1.0;

/// Samples used for the per-node mean estimate when the law is parametric
/// (empirical laws return their exact mean regardless).
pub const MEAN_SAMPLES: usize = 100;

pub fn build(domain: Domain, grid: TimeGrid) -> Result<ProblemSpec> {
    if domain.dim() != 1 {
        return Err(Error::InvalidParameter(
            "the linear test dynamics is one-dimensional".into(),
        ));
    }
    let drift = |_t: f64,
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
        let mut b = Array2::zeros((x.nrows(), 1));
        for i in 0..x.nrows() {
            b[[i, 0]] = -x[[i, 0]] + m;
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
        name: "linear_mean_field".into(),
        domain,
        grid,
        noise_kind: NoiseKind::Brownian,
        dynamics,
        init: gaussian_init(vec![0.0], 1.0),
        reference: None,
    })
}
