//! Porous-medium dynamics: the degenerate nonlinear diffusion whose
//! self-similar source solution is known in closed form, giving an exact
//! reference for every dimension.
//!
//! The solved equation is the mass-normalized form: starting from the profile
//! `U(t, x) = t^{-a} (C - kappa |x|^2 t^{-2b})_+^{1/(m-1)}` with
//! `a = d / (d (m - 1) + 2)`, `b = a / d`, `kappa = (m-1) b / (2m)`, which
//! solves `dU/dt = lap(U^m)`, the normalized density `rho = U / c0`
//! (`c0` = conserved mass) solves `d rho/dt = nu lap(rho^m)` with
//! `nu = c0^{m-1}`. Two particle representations of that equation:
//!
//! * stochastic: `dX = sqrt(2 nu) rho(t, X)^{(m-1)/2} dB`;
//! * deterministic: `dX/dt = -nu m rho^{m-2} grad rho` (needs a model with
//!   spatial gradients).

use ndarray::{Array1, Array2, ArrayView2};

use super::{ProblemSpec, RefDensityFn};
use crate::density::rejection_sample_fn;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::{ln_gamma, unit_sphere_area};
use crate::noise::NoiseKind;
use crate::sde::{Dynamics, InitFn, SigmaBatch};

/// Self-similar source profile, unnormalized.
#[derive(Clone, Debug)]
pub struct BarenblattProfile {
    pub m: f64,
    pub c: f64,
    pub dim: usize,
    mass: f64,
}

impl BarenblattProfile {
    pub fn new(m: f64, c: f64, dim: usize) -> Result<Self> {
        if !(m > 1.0) || !(c > 0.0) || dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "profile needs m > 1, c > 0, dim >= 1; got m={m}, c={c}, dim={dim}"
            )));
        }
        let mut p = BarenblattProfile { m, c, dim, mass: 0.0 };
        // Conserved mass in closed form: substituting u = (r/R)^2 in the
        // radial integral of (C - kappa r^2)^{1/(m-1)} gives a Beta integral,
        //   mass = (S_d / 2) C^{1/(m-1)} R^d B(d/2, m/(m-1)).
        let d = dim as f64;
        let r_max = p.support_radius(1.0);
        let ln_beta = ln_gamma(d / 2.0) + ln_gamma(m / (m - 1.0)) - ln_gamma(d / 2.0 + m / (m - 1.0));
        p.mass = 0.5
            * unit_sphere_area(dim)
            * c.powf(1.0 / (m - 1.0))
            * r_max.powi(dim as i32)
            * ln_beta.exp();
        Ok(p)
    }

    pub fn alpha(&self) -> f64 {
        let d = self.dim as f64;
        d / (d * (self.m - 1.0) + 2.0)
    }

    pub fn beta(&self) -> f64 {
        self.alpha() / self.dim as f64
    }

    fn kappa(&self) -> f64 {
        (self.m - 1.0) / (2.0 * self.m) * self.beta()
    }

    /// Conserved total mass of the unnormalized profile.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Diffusivity of the mass-normalized equation.
    pub fn nu(&self) -> f64 {
        self.mass.powf(self.m - 1.0)
    }

    /// Radius of the support at physical time t.
    pub fn support_radius(&self, t: f64) -> f64 {
        (self.c / self.kappa()).sqrt() * t.powf(self.beta())
    }

    fn eval_radius(&self, t: f64, r: f64) -> f64 {
        let inner = self.c - self.kappa() * r * r * t.powf(-2.0 * self.beta());
        if inner <= 0.0 {
            0.0
        } else {
            t.powf(-self.alpha()) * inner.powf(1.0 / (self.m - 1.0))
        }
    }

    /// Unnormalized profile at physical time t.
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        self.eval_radius(t, r2.sqrt())
    }

    pub fn eval_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Array1<f64> {
        Array1::from_iter(
            xs.rows()
                .into_iter()
                .map(|row| self.eval(t, row.as_slice().unwrap())),
        )
    }

    /// Mass-normalized profile (a probability density in x).
    pub fn normalized_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Array1<f64> {
        self.eval_batch(t, xs).mapv(|v| v / self.mass)
    }

    /// Accept-reject sampler from the normalized profile at physical time t.
    pub fn init_sampler(&self, t0: f64, window: &Domain) -> InitFn {
        let profile = self.clone();
        let r0 = profile.support_radius(t0);
        // Proposal box: the support box clipped to the training window.
        let lo: Vec<f64> = window.lo().iter().map(|l| l.max(-r0)).collect();
        let hi: Vec<f64> = window.hi().iter().map(|h| h.min(r0)).collect();
        let peak = profile.eval(t0, &vec![0.0; profile.dim]) / profile.mass;
        Box::new(move |n, rng| {
            let support = Domain::new(lo.clone(), hi.clone())?;
            let target = |xs: &ArrayView2<f64>| profile.normalized_batch(t0, xs);
            rejection_sample_fn(&target, &support, 1.05 * peak, n, rng)
        })
    }
}

/// The porous-medium problem on the stochastic particle representation, or
/// the deterministic one when `ode` is set.
pub fn build(
    m: f64,
    c: f64,
    domain: Domain,
    grid: TimeGrid,
    ode: bool,
) -> Result<ProblemSpec> {
    let profile = BarenblattProfile::new(m, c, domain.dim())?;
    let nu = profile.nu();
    let init = profile.init_sampler(grid.t0(), &domain);

    let dynamics = if ode {
        let drift_m = m;
        Dynamics {
            drift: Box::new(move |te, _off, x, law, _ctx| {
                let rho = law.density_batch(te, x)?;
                let mut g = law.grad_batch(te, x)?;
                for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                    // Velocity -nu m rho^{m-2} grad rho; frozen outside the
                    // (rectified) support, matching the degenerate diffusion.
                    let f = if rho[i] > 0.0 {
                        -nu * drift_m * rho[i].powf(drift_m - 2.0)
                    } else {
                        0.0
                    };
                    row.mapv_inplace(|v| f * v);
                }
                Ok(g)
            }),
            sigma: Box::new(|_te, x, _law, _ctx| Ok(SigmaBatch::Scalar(Array1::zeros(x.nrows())))),
            prepare_node: None,
        }
    } else {
        let pow = (m - 1.0) / 2.0;
        let scale = (2.0 * nu).sqrt();
        Dynamics {
            drift: Box::new(|_te, _off, x, _law, _ctx| Ok(Array2::zeros((x.nrows(), x.ncols())))),
            sigma: Box::new(move |te, x, law, _ctx| {
                let rho = law.density_batch(te, x)?;
                Ok(SigmaBatch::Scalar(
                    rho.mapv(|r| scale * r.max(0.0).powf(pow)),
                ))
            }),
            prepare_node: None,
        }
    };

    let ref_profile = profile.clone();
    let reference: RefDensityFn =
        Box::new(move |t, xs| Ok(ref_profile.normalized_batch(t, xs)));

    Ok(ProblemSpec {
        name: format!("porous_medium_d{}_m{}", domain.dim(), m),
        domain,
        grid,
        noise_kind: if ode { NoiseKind::None } else { NoiseKind::Brownian },
        dynamics,
        init,
        reference: Some(reference),
    })
}

/// The profile constant used throughout the presets.
pub const C_STANDARD: f64 = 0.11547005383792516; // sqrt(3) / 15
