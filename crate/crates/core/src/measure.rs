//! Mollified empirical measures: the smoothing kernels and the kernel density
//! estimator that turns a particle batch into the epoch's regression target.
//! KDE tables are plain numbers — nothing downstream differentiates through
//! them.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::quad::gauss_legendre_on;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MollifierKind {
    Gaussian,
    /// Compactly supported cone kernel (1 - |x|/eps)_+ with the dimension
    /// constant chosen so the kernel has unit mass.
    Triangular,
}

/// Above this exponent exp(-z) underflows to exactly +0.0, so skipping the
/// call keeps KDE sums bit-identical to the naive evaluation.
const EXP_UNDERFLOW: f64 = 750.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub kind: MollifierKind,
    pub eps: f64,
    pub dim: usize,
}

impl MollifierSpec {
    pub fn new(kind: MollifierKind, eps: f64, dim: usize) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mollifier bandwidth must be positive, got {eps}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("mollifier dimension 0".into()));
        }
        Ok(MollifierSpec { kind, eps, dim })
    }

    /// Kernel normalization in front of the shape function.
    pub fn norm_const(&self) -> f64 {
        match self.kind {
            MollifierKind::Gaussian => {
                (2.0 * std::f64::consts::PI * self.eps * self.eps).powf(-(self.dim as f64) / 2.0)
            }
            MollifierKind::Triangular => {
                cone_constant(self.dim) / self.eps.powi(self.dim as i32)
            }
        }
    }

    /// Kernel value at displacement `diff`.
    pub fn eval_diff(&self, diff: &[f64]) -> f64 {
        debug_assert_eq!(diff.len(), self.dim);
        let r2: f64 = diff.iter().map(|v| v * v).sum();
        self.eval_r2(r2, self.norm_const())
    }

    #[inline]
    fn eval_r2(&self, r2: f64, norm: f64) -> f64 {
        match self.kind {
            MollifierKind::Gaussian => {
                let z = r2 / (2.0 * self.eps * self.eps);
                if z > EXP_UNDERFLOW {
                    0.0
                } else {
                    norm * (-z).exp()
                }
            }
            MollifierKind::Triangular => {
                if r2 >= self.eps * self.eps {
                    0.0
                } else {
                    norm * (1.0 - r2.sqrt() / self.eps)
                }
            }
        }
    }

    /// Kernel Lipschitz constant; for the cone kernel this is exact.
    pub fn lipschitz_bound(&self) -> f64 {
        match self.kind {
            // |d/dr exp(-r^2/2e^2)| max at r = eps: norm / (eps sqrt(e))
            MollifierKind::Gaussian => self.norm_const() / (self.eps * 1.0f64.exp().sqrt()),
            MollifierKind::Triangular => self.norm_const() / self.eps,
        }
    }

    /// Adds the kernel gradient at displacement `diff` into `out` (zero at
    /// the cone kernel's tip and outside supports, where the kernel is flat
    /// or the subgradient convention applies).
    pub fn add_grad_diff(&self, diff: &[f64], out: &mut [f64]) {
        debug_assert_eq!(diff.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        let r2: f64 = diff.iter().map(|v| v * v).sum();
        match self.kind {
            MollifierKind::Gaussian => {
                let e2 = self.eps * self.eps;
                let z = r2 / (2.0 * e2);
                if z > EXP_UNDERFLOW {
                    return;
                }
                let s = -self.norm_const() * (-z).exp() / e2;
                for (o, d) in out.iter_mut().zip(diff) {
                    *o += s * d;
                }
            }
            MollifierKind::Triangular => {
                let r = r2.sqrt();
                if r <= 0.0 || r >= self.eps {
                    return;
                }
                let s = -self.norm_const() / (self.eps * r);
                for (o, d) in out.iter_mut().zip(diff) {
                    *o += s * d;
                }
            }
        }
    }
}

/// Unit-mass constant of the cone kernel: 1 / (S_{d-1} * int_0^1 (1-r) r^{d-1} dr).
/// The radial factor is integrated by quadrature (exact: the rule's degree
/// covers the polynomial) and cached per dimension.
pub fn cone_constant(dim: usize) -> f64 {
    use std::sync::OnceLock;
    static CACHE: OnceLock<std::sync::Mutex<std::collections::HashMap<usize, f64>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(v) = cache.lock().unwrap().get(&dim) {
        return *v;
    }
    let (rs, ws) = gauss_legendre_on(0.0, 1.0, 32);
    let radial: f64 = rs
        .iter()
        .zip(&ws)
        .map(|(r, w)| w * (1.0 - r) * r.powi(dim as i32 - 1))
        .sum();
    let c = 1.0 / (unit_sphere_area(dim) * radial);
    cache.lock().unwrap().insert(dim, c);
    c
}

/// Surface area of the unit sphere S^{d-1}: 2 pi^{d/2} / Gamma(d/2).
pub fn unit_sphere_area(dim: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(dim as f64 / 2.0) / gamma_half_integer(dim)
}

/// log Gamma(x) for x > 0 (Lanczos approximation, g = 7, about 15
/// significant digits).
pub fn ln_gamma(x: f64) -> f64 {
    assert!(x > 0.0, "ln_gamma needs a positive argument, got {x}");
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x).
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln()
            - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut a = C[0];
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (z + i as f64);
    }
    let t = z + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
}

/// Gamma(twice / 2) for positive integer `twice`, via the recurrence from
/// Gamma(1/2) = sqrt(pi) or Gamma(1) = 1.
fn gamma_half_integer(twice: usize) -> f64 {
    assert!(twice >= 1);
    let (mut x, mut k) = if twice % 2 == 0 {
        (1.0, 2)
    } else {
        (std::f64::consts::PI.sqrt(), 1)
    };
    while k < twice {
        x *= k as f64 / 2.0;
        k += 2;
    }
    x
}

/// Kernel density estimate (1/K) sum_i kernel(x - X_i) over one particle
/// batch.
pub struct Kde<'a> {
    particles: ArrayView2<'a, f64>,
    moll: MollifierSpec,
    norm: f64,
}

impl<'a> Kde<'a> {
    pub fn new(particles: ArrayView2<'a, f64>, moll: MollifierSpec) -> Result<Self> {
        if particles.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if particles.ncols() != moll.dim {
            return Err(Error::DimensionMismatch {
                expected: moll.dim,
                got: particles.ncols(),
            });
        }
        let norm = moll.norm_const();
        Ok(Kde {
            particles,
            moll,
            norm,
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.moll.dim);
        let k = self.particles.nrows() as f64;
        let mut acc = 0.0;
        for p in self.particles.rows() {
            let mut r2 = 0.0;
            for (a, b) in x.iter().zip(p.iter()) {
                let d = a - b;
                r2 += d * d;
            }
            acc += self.moll.eval_r2(r2, self.norm);
        }
        acc / k
    }

    pub fn eval_batch(&self, queries: &ArrayView2<f64>) -> Array1<f64> {
        assert_eq!(queries.ncols(), self.moll.dim);
        let mut out = Array1::zeros(queries.nrows());
        let chunk = 256;
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(ci, slot)| {
                for (j, v) in slot.iter_mut().enumerate() {
                    let row = queries.row(ci * chunk + j);
                    *v = self.eval(row.as_slice().unwrap());
                }
            });
        out
    }

    /// Spatial gradient of the estimate at one point.
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.moll.dim);
        let d = self.moll.dim;
        let mut acc = vec![0.0; d];
        let mut diff = vec![0.0; d];
        for p in self.particles.rows() {
            for (s, (a, b)) in diff.iter_mut().zip(x.iter().zip(p.iter())) {
                *s = a - b;
            }
            self.moll.add_grad_diff(&diff, &mut acc);
        }
        let k = self.particles.nrows() as f64;
        for a in acc.iter_mut() {
            *a /= k;
        }
        acc
    }

    /// Spatial gradients at a batch of query points, one row per query.
    pub fn grad_batch(&self, queries: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(queries.ncols(), self.moll.dim);
        let d = self.moll.dim;
        let mut out = Array2::zeros((queries.nrows(), d));
        let chunk = 256;
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(chunk * d)
            .enumerate()
            .for_each(|(ci, slot)| {
                for (j, row) in slot.chunks_mut(d).enumerate() {
                    let q = queries.row(ci * chunk + j);
                    row.copy_from_slice(&self.grad(q.as_slice().unwrap()));
                }
            });
        out
    }
}

/// Convenience wrapper matching the one-shot call sites.
pub fn kde_eval(
    particles: &ArrayView2<f64>,
    moll: MollifierSpec,
    queries: &ArrayView2<f64>,
) -> Result<Array1<f64>> {
    Ok(Kde::new(particles.reborrow(), moll)?.eval_batch(queries))
}

/// Indicator truncation: rows outside `domain.shrink(margin)` are replaced by
/// the origin (x * 1_{x in box}); returns the replaced-row count.
pub fn truncate_particles(
    particles: &ArrayView2<f64>,
    domain: &Domain,
    margin: f64,
) -> Result<(Array2<f64>, usize)> {
    let window = domain.shrink(margin)?;
    if particles.ncols() != domain.dim() {
        return Err(Error::DimensionMismatch {
            expected: domain.dim(),
            got: particles.ncols(),
        });
    }
    let mut out = particles.to_owned();
    let mut dropped = 0;
    for mut row in out.rows_mut() {
        if !window.contains(row.as_slice().unwrap()) {
            row.fill(0.0);
            dropped += 1;
        }
    }
    Ok((out, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gaussian_peak_matches_closed_form() {
        let moll = MollifierSpec::new(MollifierKind::Gaussian, 0.1, 1).unwrap();
        let particles = array![[0.0]];
        let kde = Kde::new(particles.view(), moll).unwrap();
        let peak = (2.0 * std::f64::consts::PI * 0.01).powf(-0.5);
        assert!((kde.eval(&[0.0]) - peak).abs() < 1e-12);
        assert!((peak - 3.9894).abs() < 1e-4);
    }

    #[test]
    fn two_particle_kde_is_mean_of_kernels() {
        let moll = MollifierSpec::new(MollifierKind::Gaussian, 0.5, 1).unwrap();
        let particles = array![[-0.5], [0.5]];
        let kde = Kde::new(particles.view(), moll).unwrap();
        let k = moll.eval_diff(&[0.5]);
        assert!((kde.eval(&[0.0]) - k).abs() < 1e-15);
    }

    #[test]
    fn cone_constant_1d_is_one() {
        assert!((cone_constant(1) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ln_gamma_matches_known_values() {
        let pi = std::f64::consts::PI;
        assert!((ln_gamma(0.5).exp() - pi.sqrt()).abs() < 1e-13);
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(5.0).exp() - 24.0).abs() < 1e-11);
        // Gamma(7.5) = 6.5 * 5.5 * ... * 1.5 * sqrt(pi)/2.
        assert!((ln_gamma(7.5).exp() - 1871.254_305_797_788_2).abs() < 1e-9);
        // Reflection branch.
        assert!((ln_gamma(0.25).exp() - 3.625_609_908_221_908_3).abs() < 1e-12);
        // Consistency with the exact half-integer recurrence.
        for twice in 1..=12 {
            let exact = gamma_half_integer(twice);
            let rel = (ln_gamma(twice as f64 / 2.0).exp() - exact).abs() / exact;
            assert!(rel < 1e-13, "twice={twice} rel={rel}");
        }
    }

    #[test]
    fn cone_constant_2d_is_three_over_pi() {
        // Polar: int (1-r) r dr dtheta over the unit disc = 2pi (1/2 - 1/3) = pi/3.
        assert!((cone_constant(2) - 3.0 / std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn triangular_kernel_vanishes_outside_radius() {
        let moll = MollifierSpec::new(MollifierKind::Triangular, 0.3, 2).unwrap();
        assert_eq!(moll.eval_diff(&[0.3, 0.0]), 0.0);
        assert_eq!(moll.eval_diff(&[0.25, 0.25]), 0.0);
        assert!(moll.eval_diff(&[0.2, 0.0]) > 0.0);
    }

    #[test]
    fn triangular_kde_mass_is_one() {
        let moll = MollifierSpec::new(MollifierKind::Triangular, 0.5, 1).unwrap();
        let particles = array![[-0.7], [0.1], [0.2], [0.9], [-0.3], [0.0], [0.55], [-1.1]];
        let kde = Kde::new(particles.view(), moll).unwrap();
        // box = hull + eps, fine midpoint rule (integrand is piecewise linear)
        let dom = Domain::new(vec![-1.6], vec![1.4]).unwrap();
        let (grid, w) = dom.midpoint_grid(1 << 16);
        let mass: f64 = kde.eval_batch(&grid.view()).sum() * w;
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
    }

    #[test]
    fn gaussian_kde_mass_2d_on_padded_hull() {
        let moll = MollifierSpec::new(MollifierKind::Gaussian, 0.2, 2).unwrap();
        let particles = array![[0.3, -0.4], [-0.5, 0.2], [0.0, 0.0]];
        let kde = Kde::new(particles.view(), moll).unwrap();
        // hull [-0.5,0.3]x[-0.4,0.2] padded by 6 eps
        let dom = Domain::new(vec![-1.7, -1.6], vec![1.5, 1.4]).unwrap();
        let (grid, w) = dom.midpoint_grid(256);
        let mass: f64 = kde.eval_batch(&grid.view()).sum() * w;
        assert!(mass >= 0.999 && mass <= 1.0 + 1e-6, "mass {mass}");
    }

    #[test]
    fn kde_is_exactly_mirror_symmetric() {
        let moll = MollifierSpec::new(MollifierKind::Gaussian, 0.17, 1).unwrap();
        let particles = array![[0.31], [-0.6], [1.24], [0.05]];
        let mirrored = particles.mapv(|v| -v);
        let a = Kde::new(particles.view(), moll).unwrap();
        let b = Kde::new(mirrored.view(), moll).unwrap();
        for q in [-1.3, -0.2, 0.0, 0.44, 2.0] {
            assert_eq!(a.eval(&[q]), b.eval(&[-q]), "asymmetry at {q}");
        }
    }

    #[test]
    fn underflow_skip_is_bit_identical_to_naive_sum() {
        let moll = MollifierSpec::new(MollifierKind::Gaussian, 0.01, 1).unwrap();
        // particles far apart so most kernel evals underflow
        let particles = array![[-3.0], [-1.0], [0.0], [1.0], [3.0], [0.002]];
        let kde = Kde::new(particles.view(), moll).unwrap();
        let norm = moll.norm_const();
        for q in [-3.0, -0.5, 0.0, 0.0005, 2.0, 3.05] {
            let naive: f64 = particles
                .column(0)
                .iter()
                .map(|p| {
                    let z = (q - p) * (q - p) / (2.0 * 0.01 * 0.01);
                    if z > EXP_UNDERFLOW { 0.0 } else { norm * (-z).exp() }
                })
                .sum::<f64>()
                / particles.nrows() as f64;
            // reference without the skip branch
            let full: f64 = particles
                .column(0)
                .iter()
                .map(|p| norm * (-(q - p) * (q - p) / (2.0 * 0.01 * 0.01)).exp())
                .sum::<f64>()
                / particles.nrows() as f64;
            assert_eq!(naive, full);
            assert_eq!(kde.eval(&[q]), full);
        }
    }

    #[test]
    fn triangular_kde_respects_lipschitz_bound() {
        let moll = MollifierSpec::new(MollifierKind::Triangular, 0.25, 1).unwrap();
        let particles = array![[-0.4], [-0.1], [0.0], [0.3], [0.31], [0.7]];
        let kde = Kde::new(particles.view(), moll).unwrap();
        let bound = cone_constant(1) / (0.25 * 0.25);
        let h = 1e-7;
        let mut x = -1.0;
        while x < 1.0 {
            let slope = (kde.eval(&[x + h]) - kde.eval(&[x - h])) / (2.0 * h);
            assert!(
                slope.abs() <= bound * (1.0 + 1e-6),
                "slope {slope} exceeds {bound} at {x}"
            );
            x += 0.013;
        }
    }

    #[test]
    fn truncation_sends_outliers_to_origin() {
        let dom = Domain::cube(1, 2.0).unwrap();
        let particles = array![[4.0], [1.0], [-1.94], [1.96]];
        let (out, dropped) = truncate_particles(&particles.view(), &dom, 0.05).unwrap();
        assert_eq!(out, array![[0.0], [1.0], [-1.94], [0.0]]);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn kde_rejects_empty_and_mismatched_input() {
        let moll = MollifierSpec::new(MollifierKind::Gaussian, 0.1, 2).unwrap();
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            Kde::new(empty.view(), moll),
            Err(Error::EmptyBatch)
        ));
        let wrong = Array2::<f64>::zeros((3, 1));
        assert!(Kde::new(wrong.view(), moll).is_err());
        assert!(MollifierSpec::new(MollifierKind::Gaussian, 0.0, 1).is_err());
    }

    #[test]
    fn kde_gradient_matches_finite_differences() {
        use crate::fdcheck::{central_diff, max_scaled_err};
        let particles = array![[0.3, -0.1], [-0.2, 0.4], [0.05, 0.05]];
        for kind in [MollifierKind::Gaussian, MollifierKind::Triangular] {
            let moll = MollifierSpec::new(kind, 0.5, 2).unwrap();
            let kde = Kde::new(particles.view(), moll).unwrap();
            // Query points chosen off the cone kernel's kink shells.
            for q in [[0.11, 0.07], [-0.13, 0.22], [0.41, -0.28]] {
                let g = kde.grad(&q);
                let mut p = q;
                let fd = central_diff(&mut p, 1e-6, |x| kde.eval(x));
                assert!(
                    max_scaled_err(&g, &fd) < 1e-5,
                    "{kind:?} at {q:?}: analytic {g:?} vs fd {fd:?}"
                );
            }
        }
    }

    #[test]
    fn kde_gradient_vanishes_far_away_and_batches_agree() {
        let particles = array![[0.0], [0.5]];
        let moll = MollifierSpec::new(MollifierKind::Triangular, 0.3, 1).unwrap();
        let kde = Kde::new(particles.view(), moll).unwrap();
        assert_eq!(kde.grad(&[5.0]), vec![0.0]);
        assert_eq!(kde.grad(&[0.0]), vec![0.0], "tip subgradient is zero");
        let qs = array![[0.1], [0.4], [-0.2], [0.62]];
        let batch = kde.grad_batch(&qs.view());
        for (i, q) in qs.rows().into_iter().enumerate() {
            assert_eq!(batch[[i, 0]], kde.grad(q.as_slice().unwrap())[0]);
        }
    }
}
