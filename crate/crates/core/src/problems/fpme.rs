//! Density-driven dynamics under heavy-tailed noise:
//! `dX = rho(t, X-)^{(m-1)/alpha} dL^alpha` with a symmetric alpha-stable
//! driver. Its law solves the fractional analogue of the porous-medium
//! equation, `d rho/dt = -(-Lap)^{alpha/2}(rho^m)`, whose hallmark is
//! infinite propagation speed: mass escapes any compact set immediately,
//! unlike the Brownian porous-medium flow started from the same profile.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{pme::BarenblattProfile, ProblemSpec};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::NoiseKind;
use crate::sde::{Dynamics, SigmaBatch};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FpmeParams {
    /// Nonlinearity exponent (m > 1).
    pub m: f64,
    /// Stability index of the driving noise (0 < alpha < 2).
    pub alpha: f64,
}

impl Default for FpmeParams {
    fn default() -> Self {
        FpmeParams { m: 2.0, alpha: 1.0 }
    }
}

/// Diffusion coefficient `rho^{(m-1)/alpha}`; rejects negative densities.
#[inline]
pub fn fpme_sigma(rho: f64, m: f64, alpha: f64) -> Result<f64> {
    if rho < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "density must be nonnegative, got {rho}"
        )));
    }
    Ok(rho.powf((m - 1.0) / alpha))
}

/// Initial profile: the time-1 self-similar porous-medium bump with the same
/// nonlinearity, normalized to unit mass. Starting from a compactly
/// supported profile makes the heavy-tail spreading visible immediately.
pub fn initial_profile(p: FpmeParams) -> Result<BarenblattProfile> {
    BarenblattProfile::new(p.m, super::pme::C_STANDARD, 1)
}

pub fn build(p: FpmeParams, domain: Domain, grid: TimeGrid) -> Result<ProblemSpec> {
    if domain.dim() != 1 {
        return Err(Error::InvalidParameter(
            "the heavy-tailed porous-medium preset is one-dimensional".into(),
        ));
    }
    if !(p.m > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "nonlinearity exponent must exceed 1, got {}",
            p.m
        )));
    }
    if !(p.alpha > 0.0 && p.alpha < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "stability index must lie in (0, 2), got {}",
            p.alpha
        )));
    }
    let profile = initial_profile(p)?;
    let init = profile.init_sampler(1.0, &domain);
    let (m, alpha) = (p.m, p.alpha);
    let dynamics = Dynamics {
        drift: Box::new(|_t, _off, x, _law, _ctx| Ok(ndarray::Array2::zeros(x.dim()))),
        sigma: Box::new(move |t, x, law, _ctx| {
            let rho = law.density_batch(t, x)?;
            let mut s = Array1::zeros(x.nrows());
            for (si, &r) in s.iter_mut().zip(rho.iter()) {
                *si = fpme_sigma(r, m, alpha)?;
            }
            Ok(SigmaBatch::Scalar(s))
        }),
        prepare_node: None,
    };
    Ok(ProblemSpec {
        name: "fractional_porous_medium".into(),
        domain,
        grid,
        noise_kind: NoiseKind::AlphaStable { alpha: p.alpha },
        dynamics,
        init,
        reference: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::LawFlow;
    use crate::noise::{stream_rng, tag};
    use ndarray::{array, ArrayView2};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigma_hand_values() {
        // Exponent (m-1)/alpha = 1 for the default parameters.
        assert!((fpme_sigma(0.4, 2.0, 1.0).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(fpme_sigma(0.0, 2.0, 1.0).unwrap(), 0.0);
        assert!((fpme_sigma(0.5, 3.0, 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(fpme_sigma(-0.1, 2.0, 1.0).is_err());
    }

    #[test]
    fn initial_profile_mass_matches_the_closed_form() {
        // For m=2 in one dimension the bump is (C - x^2/12)_+ at t=1 with
        // total mass (4/3) C sqrt(12 C).
        let profile = initial_profile(FpmeParams::default()).unwrap();
        let c = super::super::pme::C_STANDARD;
        let closed = 4.0 / 3.0 * c * (12.0 * c).sqrt();
        assert!(
            (profile.mass() - closed).abs() < 1e-12,
            "mass {} vs {closed}",
            profile.mass()
        );
        let peak = profile.eval(1.0, &[0.0]);
        assert!((peak - c).abs() < 1e-15);
        let edge = (12.0 * c).sqrt();
        assert_eq!(profile.eval(1.0, &[edge + 1e-9]), 0.0);
    }

    struct UniformBump;
    impl LawFlow for UniformBump {
        fn dim(&self) -> usize {
            1
        }
        fn density_batch(&self, _t: f64, xs: &ArrayView2<f64>) -> Result<Array1<f64>> {
            Ok(Array1::from_iter(xs.rows().into_iter().map(|r| {
                if r[0].abs() < 1.0 {
                    0.5
                } else {
                    0.0
                }
            })))
        }
        fn grad_batch(&self, _t: f64, _xs: &ArrayView2<f64>) -> Result<ndarray::Array2<f64>> {
            Err(Error::Capability("unused".into()))
        }
        fn sample(
            &self,
            _t: f64,
            _n: usize,
            _rng: &mut ChaCha8Rng,
        ) -> Result<ndarray::Array2<f64>> {
            Err(Error::Capability("unused".into()))
        }
        fn mean(&self, _t: f64, _n: usize, _rng: &mut ChaCha8Rng) -> Result<Array1<f64>> {
            Err(Error::Capability("unused".into()))
        }
    }

    #[test]
    fn dynamics_wire_density_into_the_noise_amplitude() {
        let spec = build(
            FpmeParams::default(),
            Domain::cube(1, 3.0).unwrap(),
            TimeGrid::new(0.0, 0.5, 50).unwrap(),
        )
        .unwrap();
        assert!(matches!(spec.noise_kind, NoiseKind::AlphaStable { alpha } if alpha == 1.0));
        let x = array![[0.0], [2.0]];
        let b = (spec.dynamics.drift)(
            0.0,
            0,
            &x.view(),
            &UniformBump,
            &crate::sde::NodeCtx::default(),
        )
        .unwrap();
        assert_eq!(b, ndarray::Array2::<f64>::zeros((2, 1)));
        let s = (spec.dynamics.sigma)(0.0, &x.view(), &UniformBump, &crate::sde::NodeCtx::default())
            .unwrap();
        match s {
            SigmaBatch::Scalar(v) => {
                assert!((v[0] - 0.5).abs() < 1e-15);
                assert_eq!(v[1], 0.0);
            }
            _ => panic!("expected scalar amplitude"),
        }
    }

    #[test]
    fn initial_draws_stay_inside_the_time_one_support() {
        let spec = build(
            FpmeParams::default(),
            Domain::cube(1, 3.0).unwrap(),
            TimeGrid::new(0.0, 0.5, 50).unwrap(),
        )
        .unwrap();
        let mut rng = stream_rng(9, &[tag::INIT]);
        let draws = (spec.init)(4000, &mut rng).unwrap();
        let edge = (12.0 * super::super::pme::C_STANDARD).sqrt();
        for &x in draws.column(0).iter() {
            assert!(x.abs() <= edge + 1e-12, "draw {x} outside support {edge}");
        }
        // Mean is zero by symmetry (loose Monte Carlo tolerance).
        let mean = draws.column(0).mean().unwrap();
        assert!(mean.abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn parameter_validation() {
        let domain = Domain::cube(1, 3.0).unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 50).unwrap();
        assert!(build(FpmeParams { m: 1.0, alpha: 1.0 }, domain.clone(), grid.clone()).is_err());
        assert!(build(FpmeParams { m: 2.0, alpha: 2.0 }, domain.clone(), grid.clone()).is_err());
        assert!(build(FpmeParams { m: 2.0, alpha: 0.0 }, domain, grid).is_err());
    }
}
