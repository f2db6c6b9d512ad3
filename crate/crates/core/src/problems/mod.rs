//! Problem definitions: dynamics closures, initial laws, reference
//! solutions. Everything a problem knows about the running density model
//! goes through [`crate::density::LawFlow`], so any model plugs into any
//! problem the capabilities allow.

pub mod curie_weiss;
pub mod fpme;
pub mod keller_segel;
pub mod linear;
pub mod pme;

use ndarray::{Array1, Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::domain::Domain;
use crate::error::Result;
use crate::grid::TimeGrid;
use crate::noise::NoiseKind;
use crate::sde::{Dynamics, InitFn};

/// Reference density at *physical* time, for error metrics.
pub type RefDensityFn =
    Box<dyn Fn(f64, &ArrayView2<f64>) -> Result<Array1<f64>> + Send + Sync>;

pub struct ProblemSpec {
    pub name: String,
    /// Training window (also the box every non-exact model lives on).
    pub domain: Domain,
    pub grid: TimeGrid,
    pub noise_kind: NoiseKind,
    pub dynamics: Dynamics,
    pub init: InitFn,
    pub reference: Option<RefDensityFn>,
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }
}

/// i.i.d. Gaussian initial law, N(center, sigma^2 I).
pub fn gaussian_init(center: Vec<f64>, sigma: f64) -> InitFn {
    Box::new(move |n, rng: &mut ChaCha8Rng| {
        let d = center.len();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                out[[i, j]] = center[j] + sigma * z;
            }
        }
        Ok(out)
    })
}

/// Two-component Gaussian mixture with common isotropic spread.
pub fn gaussian_mixture_init(
    centers: [Vec<f64>; 2],
    weights: [f64; 2],
    sigma: f64,
) -> InitFn {
    let p0 = weights[0] / (weights[0] + weights[1]);
    Box::new(move |n, rng: &mut ChaCha8Rng| {
        use rand::Rng;
        let d = centers[0].len();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let c = if rng.random::<f64>() < p0 {
                &centers[0]
            } else {
                &centers[1]
            };
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                out[[i, j]] = c[j] + sigma * z;
            }
        }
        Ok(out)
    })
}
