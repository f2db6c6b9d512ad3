//! Planar aggregation-diffusion (chemotaxis) dynamics: particles attract
//! each other through the logarithmic interaction kernel while diffusing.
//!
//! Drift on particle i is `-(1/N) sum_j grad W(x_i - y_j)` over an
//! interaction cloud drawn from the current law, with
//! `grad W(x) = x / (2 pi |x|^2)` clamped near the origin; diffusion is
//! `sqrt(2)`. With unit total mass the system is globally subcritical and its
//! second spatial moment grows at the exact rate `4 - 1/(2 pi)`.
//!
//! The module also ships an explicit finite-difference solver of the
//! corresponding mean-field PDE (`d rho/dt = lap rho - div(rho b[rho])`) used
//! as the reference solution: conservative fluxes on a cell-centered grid,
//! free-space velocity evaluated by FFT convolution with the clamped kernel.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{gaussian_init, gaussian_mixture_init, ProblemSpec};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::NoiseKind;
use crate::sde::{Dynamics, NodeCtx, SigmaBatch};

/// Clamp radius of the interaction kernel.
pub const DELTA_CUT: f64 = 1e-3;

/// Exact growth rate of E|X_t|^2 for unit mass: 2 d - 1/(2 pi) with d = 2.
pub const SECOND_MOMENT_SLOPE: f64 = 4.0 - 1.0 / (2.0 * PI);

/// Initial-law variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KsInit {
    /// Isotropic Gaussian at the origin with coordinate variance 0.18.
    Gaussian,
    /// 1/3 : 2/3 mixture at (-1.5, 0) and (1, 0), same spread.
    Mixture,
}

const INIT_VAR: f64 = 0.18;

impl KsInit {
    /// Initial density as a plain function (FD initial data, t = 0
    /// reference).
    pub fn density(&self, x: f64, y: f64) -> f64 {
        let g = |cx: f64, cy: f64| {
            let r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            (1.0 / (2.0 * PI * INIT_VAR)) * (-r2 / (2.0 * INIT_VAR)).exp()
        };
        match self {
            KsInit::Gaussian => g(0.0, 0.0),
            KsInit::Mixture => g(-1.5, 0.0) / 3.0 + 2.0 * g(1.0, 0.0) / 3.0,
        }
    }

    pub fn sampler(&self) -> crate::sde::InitFn {
        let sigma = INIT_VAR.sqrt();
        match self {
            KsInit::Gaussian => gaussian_init(vec![0.0, 0.0], sigma),
            KsInit::Mixture => gaussian_mixture_init(
                [vec![-1.5, 0.0], vec![1.0, 0.0]],
                [1.0, 2.0],
                sigma,
            ),
        }
    }
}

/// Clamped interaction gradient.
#[inline]
pub fn grad_w(dx: f64, dy: f64) -> (f64, f64) {
    let r2 = (dx * dx + dy * dy).max(DELTA_CUT * DELTA_CUT);
    let f = 1.0 / (2.0 * PI * r2);
    (dx * f, dy * f)
}

/// How the interaction cloud is shared among particles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudSharing {
    /// One cloud per node, shared read-only by all particles (default).
    Shared,
    /// An independent cloud per particle (much more sampling per node).
    PerParticle,
}

pub fn build(
    init: KsInit,
    domain: Domain,
    grid: TimeGrid,
    n_cloud: usize,
    sharing: CloudSharing,
    n_particles: usize,
) -> Result<ProblemSpec> {
    if domain.dim() != 2 {
        return Err(Error::InvalidParameter(
            "aggregation-diffusion dynamics is two-dimensional".into(),
        ));
    }
    if n_cloud == 0 {
        return Err(Error::InvalidParameter("interaction cloud size 0".into()));
    }
    let total = match sharing {
        CloudSharing::Shared => n_cloud,
        CloudSharing::PerParticle => n_cloud
            .checked_mul(n_particles)
            .ok_or_else(|| Error::InvalidParameter("per-particle cloud overflows".into()))?,
    };

    let drift = move |_te: f64,
                      off: usize,
                      x: &ArrayView2<f64>,
                      _law: &dyn crate::density::LawFlow,
                      ctx: &NodeCtx|
          -> Result<Array2<f64>> {
        let cloud = ctx
            .cloud
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("missing interaction cloud".into()))?;
        let n = x.nrows();
        let mut b = Array2::zeros((n, 2));
        for i in 0..n {
            let rows = match sharing {
                CloudSharing::Shared => 0..cloud.nrows(),
                CloudSharing::PerParticle => {
                    let g = off + i;
                    g * n_cloud..(g + 1) * n_cloud
                }
            };
            if rows.end > cloud.nrows() {
                return Err(Error::InvalidParameter(format!(
                    "interaction cloud has {} rows, particle {} wants {}..{}",
                    cloud.nrows(),
                    off + i,
                    rows.start,
                    rows.end
                )));
            }
            let (xi, yi) = (x[[i, 0]], x[[i, 1]]);
            let mut ax = 0.0;
            let mut ay = 0.0;
            for j in rows.clone() {
                let (gx, gy) = grad_w(xi - cloud[[j, 0]], yi - cloud[[j, 1]]);
                ax += gx;
                ay += gy;
            }
            let inv = 1.0 / rows.len() as f64;
            b[[i, 0]] = -ax * inv;
            b[[i, 1]] = -ay * inv;
        }
        Ok(b)
    };

    let sqrt2 = 2.0f64.sqrt();
    let dynamics = Dynamics {
        drift: Box::new(drift),
        sigma: Box::new(move |_te, x, _law, _ctx| {
            Ok(SigmaBatch::Scalar(Array1::from_elem(x.nrows(), sqrt2)))
        }),
        prepare_node: Some(Box::new(move |law, t, rng| {
            Ok(NodeCtx {
                cloud: Some(law.sample(t, total, rng)?),
                mean: None,
            })
        })),
    };

    Ok(ProblemSpec {
        name: format!("aggregation_diffusion_{init:?}").to_lowercase(),
        domain,
        grid,
        noise_kind: NoiseKind::Brownian,
        dynamics,
        init: init.sampler(),
        reference: None,
    })
}

/// Finite-difference reference configuration.
#[derive(Clone, Debug)]
pub struct FdConfig {
    /// Half-width of the square computational box.
    pub half_width: f64,
    /// Cells per axis.
    pub cells: usize,
    /// Final time.
    pub horizon: f64,
    /// Number of stored snapshots including t = 0.
    pub snapshots: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            half_width: 4.0,
            cells: 96,
            horizon: 0.2,
            snapshots: 21,
        }
    }
}

pub struct FdSolution {
    half_width: f64,
    cells: usize,
    times: Vec<f64>,
    fields: Vec<Array2<f64>>,
}

impl FdSolution {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    fn h(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    fn nearest(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, ti) in self.times.iter().enumerate() {
            if (ti - t).abs() < (self.times[best] - t).abs() {
                best = i;
            }
        }
        best
    }

    /// Bilinear interpolation of the snapshot nearest to `t`; zero outside
    /// the box.
    pub fn density_at(&self, t: f64, xs: &ArrayView2<f64>) -> Array1<f64> {
        let field = &self.fields[self.nearest(t)];
        let (l, h, g) = (self.half_width, self.h(), self.cells);
        Array1::from_iter(xs.rows().into_iter().map(|row| {
            let (x, y) = (row[0], row[1]);
            if x.abs() >= l || y.abs() >= l {
                return 0.0;
            }
            let u = ((x + l) / h - 0.5).clamp(0.0, (g - 1) as f64);
            let v = ((y + l) / h - 0.5).clamp(0.0, (g - 1) as f64);
            let (i0, j0) = ((u as usize).min(g - 2), (v as usize).min(g - 2));
            let (fu, fv) = (u - i0 as f64, v - j0 as f64);
            field[[i0, j0]] * (1.0 - fu) * (1.0 - fv)
                + field[[i0 + 1, j0]] * fu * (1.0 - fv)
                + field[[i0, j0 + 1]] * (1.0 - fu) * fv
                + field[[i0 + 1, j0 + 1]] * fu * fv
        }))
    }

    pub fn mass(&self, t: f64) -> f64 {
        let field = &self.fields[self.nearest(t)];
        field.sum() * self.h() * self.h()
    }

    /// Second spatial moment of the snapshot nearest to `t`.
    pub fn second_moment(&self, t: f64) -> f64 {
        let field = &self.fields[self.nearest(t)];
        let (l, h, g) = (self.half_width, self.h(), self.cells);
        let mut acc = 0.0;
        for i in 0..g {
            let x = -l + (i as f64 + 0.5) * h;
            for j in 0..g {
                let y = -l + (j as f64 + 0.5) * h;
                acc += (x * x + y * y) * field[[i, j]];
            }
        }
        acc * h * h
    }
}

struct Conv2 {
    g: usize,
    p: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    khat_x: Vec<Complex<f64>>,
    khat_y: Vec<Complex<f64>>,
}

fn fft2(buf: &mut [Complex<f64>], p: usize, fft: &Arc<dyn Fft<f64>>) {
    for r in 0..p {
        fft.process(&mut buf[r * p..(r + 1) * p]);
    }
    transpose_square(buf, p);
    for r in 0..p {
        fft.process(&mut buf[r * p..(r + 1) * p]);
    }
    transpose_square(buf, p);
}

fn transpose_square(buf: &mut [Complex<f64>], p: usize) {
    for i in 0..p {
        for j in (i + 1)..p {
            buf.swap(i * p + j, j * p + i);
        }
    }
}

impl Conv2 {
    fn new(g: usize, h: f64) -> Conv2 {
        let p = (2 * g).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(p);
        let ifft = planner.plan_fft_inverse(p);
        // Drift kernel with the minus sign folded in:
        // k(dx, dy) = -(dx, dy) h^2 / (2 pi max(r^2, delta^2)), zero at 0.
        let mut kx = vec![Complex::new(0.0, 0.0); p * p];
        let mut ky = vec![Complex::new(0.0, 0.0); p * p];
        let gi = g as isize;
        for di in -(gi - 1)..gi {
            for dj in -(gi - 1)..gi {
                if di == 0 && dj == 0 {
                    continue;
                }
                let (dx, dy) = (di as f64 * h, dj as f64 * h);
                let r2 = (dx * dx + dy * dy).max(DELTA_CUT * DELTA_CUT);
                let f = h * h / (2.0 * PI * r2);
                let idx = (di.rem_euclid(p as isize) as usize) * p
                    + dj.rem_euclid(p as isize) as usize;
                kx[idx] = Complex::new(-dx * f, 0.0);
                ky[idx] = Complex::new(-dy * f, 0.0);
            }
        }
        fft2(&mut kx, p, &fft);
        fft2(&mut ky, p, &fft);
        Conv2 {
            g,
            p,
            fft,
            ifft,
            khat_x: kx,
            khat_y: ky,
        }
    }

    /// Velocity field b = -(grad W * rho) at the cell centers.
    fn velocity(&self, rho: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (g, p) = (self.g, self.p);
        let mut buf = vec![Complex::new(0.0, 0.0); p * p];
        for i in 0..g {
            for j in 0..g {
                buf[i * p + j] = Complex::new(rho[[i, j]], 0.0);
            }
        }
        fft2(&mut buf, p, &self.fft);
        let mut bx = buf.clone();
        let mut by = buf;
        for i in 0..p * p {
            bx[i] *= self.khat_x[i];
            by[i] *= self.khat_y[i];
        }
        fft2(&mut bx, p, &self.ifft);
        fft2(&mut by, p, &self.ifft);
        let scale = 1.0 / (p * p) as f64;
        let extract = |v: &[Complex<f64>]| {
            Array2::from_shape_fn((g, g), |(i, j)| v[i * p + j].re * scale)
        };
        (extract(&bx), extract(&by))
    }
}

/// Direct O(G^4) velocity sum, the oracle the FFT path is tested against.
#[cfg(test)]
fn velocity_direct(rho: &Array2<f64>, half_width: f64) -> (Array2<f64>, Array2<f64>) {
    let g = rho.nrows();
    let h = 2.0 * half_width / g as f64;
    let mut bx = Array2::zeros((g, g));
    let mut by = Array2::zeros((g, g));
    for i in 0..g {
        for j in 0..g {
            let mut ax = 0.0;
            let mut ay = 0.0;
            for ii in 0..g {
                for jj in 0..g {
                    if ii == i && jj == j {
                        continue;
                    }
                    let (gx, gy) = grad_w((i as f64 - ii as f64) * h, (j as f64 - jj as f64) * h);
                    ax += gx * rho[[ii, jj]];
                    ay += gy * rho[[ii, jj]];
                }
            }
            bx[[i, j]] = -ax * h * h;
            by[[i, j]] = -ay * h * h;
        }
    }
    (bx, by)
}

/// Explicit conservative solve of the mean-field PDE.
pub fn solve_reference(init: KsInit, cfg: &FdConfig) -> Result<FdSolution> {
    let g = cfg.cells;
    if g < 8 || cfg.snapshots < 2 || !(cfg.horizon > 0.0) || !(cfg.half_width > 0.0) {
        return Err(Error::InvalidParameter(
            "reference solve needs cells >= 8, snapshots >= 2, positive horizon and width".into(),
        ));
    }
    let l = cfg.half_width;
    let h = 2.0 * l / g as f64;
    // Diffusion-stability bound h^2/4 with margin; rounded so snapshots land
    // on steps exactly.
    let blocks = cfg.snapshots - 1;
    let per_block = ((cfg.horizon / blocks as f64) / (h * h / 8.0)).ceil() as usize;
    let dt = cfg.horizon / (blocks * per_block) as f64;

    let mut rho = Array2::from_shape_fn((g, g), |(i, j)| {
        let x = -l + (i as f64 + 0.5) * h;
        let y = -l + (j as f64 + 0.5) * h;
        init.density(x, y)
    });
    // Normalize discrete mass to exactly one.
    let mass: f64 = rho.sum() * h * h;
    rho.mapv_inplace(|v| v / mass);

    let conv = Conv2::new(g, h);
    let mut times = vec![0.0];
    let mut fields = vec![rho.clone()];
    let mut fx = Array2::zeros((g + 1, g));
    let mut fy = Array2::zeros((g, g + 1));
    for block in 0..blocks {
        for _ in 0..per_block {
            let (bx, by) = conv.velocity(&rho);
            // Faces: central advective flux + diffusive flux; outer walls
            // closed (mass is conserved to round-off).
            for i in 0..g - 1 {
                for j in 0..g {
                    let adv = 0.5 * (rho[[i, j]] * bx[[i, j]] + rho[[i + 1, j]] * bx[[i + 1, j]]);
                    let diff = (rho[[i + 1, j]] - rho[[i, j]]) / h;
                    fx[[i + 1, j]] = adv - diff;
                }
            }
            for i in 0..g {
                for j in 0..g - 1 {
                    let adv = 0.5 * (rho[[i, j]] * by[[i, j]] + rho[[i, j + 1]] * by[[i, j + 1]]);
                    let diff = (rho[[i, j + 1]] - rho[[i, j]]) / h;
                    fy[[i, j + 1]] = adv - diff;
                }
            }
            for i in 0..g {
                for j in 0..g {
                    rho[[i, j]] -=
                        dt / h * (fx[[i + 1, j]] - fx[[i, j]] + fy[[i, j + 1]] - fy[[i, j]]);
                }
            }
        }
        times.push((block + 1) as f64 * cfg.horizon / blocks as f64);
        fields.push(rho.clone());
    }
    Ok(FdSolution {
        half_width: l,
        cells: g,
        times,
        fields,
    })
}
