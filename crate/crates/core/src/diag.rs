//! Error metrics and a-posteriori estimates: Monte Carlo relative L2 error
//! against a reference, 1D and sliced Wasserstein estimators, the
//! second-moment slope regression, the one-step law map, the exponentially
//! weighted path distance H_alpha, and the fixed-point posterior bound.

use ndarray::{Array1, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::{stream_rng, tag, NoiseSource};
use crate::problems::ProblemSpec;
use crate::sde::{simulate_batch, InitFn, SimParams, TrajectoryEnsemble};

/// One epoch's diagnostic summary. Optional entries are metrics that only
/// apply to some problems (a reference density, a known slope, an estimator
/// configuration).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricReport {
    pub epoch: u64,
    pub relative_l2: f64,
    pub w1: Option<f64>,
    pub second_moment_slope: Option<f64>,
    pub posterior_h_alpha: Option<f64>,
    pub posterior_bound: Option<f64>,
}

impl MetricReport {
    /// Finiteness and sign sanity (the slope may legitimately be negative).
    pub fn validate(&self) -> Result<()> {
        let epoch = self.epoch as usize;
        let nonneg: [(&'static str, Option<f64>); 4] = [
            ("relative_l2", Some(self.relative_l2)),
            ("w1", self.w1),
            ("posterior_h_alpha", self.posterior_h_alpha),
            ("posterior_bound", self.posterior_bound),
        ];
        for (what, v) in nonneg {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::NonFinite { what, epoch });
                }
            }
        }
        if let Some(s) = self.second_moment_slope {
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    what: "second_moment_slope",
                    epoch,
                });
            }
        }
        Ok(())
    }
}

/// Monte Carlo relative L2 error sqrt(sum (c0*f - u)^2) / sqrt(sum u^2) over
/// `n_e` uniform points on the window. `model` and `reference` are already
/// bound to the evaluation time.
pub fn relative_l2(
    model: &dyn Fn(&ArrayView2<f64>) -> Result<Array1<f64>>,
    reference: &dyn Fn(&ArrayView2<f64>) -> Result<Array1<f64>>,
    domain: &Domain,
    n_e: usize,
    scale_c0: f64,
    seed: u64,
) -> Result<f64> {
    if n_e == 0 {
        return Err(Error::InvalidParameter(
            "relative error needs at least one sample point".into(),
        ));
    }
    let mut rng = stream_rng(seed, &[tag::DIAG, 1]);
    let xs = domain.sample_uniform(n_e, &mut rng);
    let f = model(&xs.view())?;
    let u = reference(&xs.view())?;
    if f.len() != n_e || u.len() != n_e {
        return Err(Error::DimensionMismatch {
            expected: n_e,
            got: f.len().min(u.len()),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (fv, uv) in f.iter().zip(u.iter()) {
        let d = scale_c0 * fv - uv;
        num += d * d;
        den += uv * uv;
    }
    if den <= 0.0 {
        return Err(Error::DegenerateDensity(
            "reference vanishes on the whole evaluation sample".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// Exact p-Wasserstein distance between two empirical measures on the line,
/// p in {1, 2}. Equal sample counts use the sorted-sample coupling directly;
/// unequal counts integrate the quantile difference over the merged
/// breakpoints (still exact for empirical measures).
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: usize) -> Result<f64> {
    if !(p == 1 || p == 2) {
        return Err(Error::InvalidParameter(format!(
            "transport order must be 1 or 2, got {p}"
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "transport inputs must be finite".into(),
        ));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let pow = |d: f64| if p == 1 { d } else { d * d };
    let integral = if sa.len() == sb.len() {
        let n = sa.len() as f64;
        sa.iter()
            .zip(&sb)
            .map(|(x, y)| pow((x - y).abs()))
            .sum::<f64>()
            / n
    } else {
        let (na, nb) = (sa.len(), sb.len());
        let mut i = 0usize;
        let mut j = 0usize;
        let mut u = 0.0f64;
        let mut acc = 0.0f64;
        while i < na && j < nb {
            let ua = (i + 1) as f64 / na as f64;
            let ub = (j + 1) as f64 / nb as f64;
            let next = ua.min(ub).min(1.0);
            acc += (next - u) * pow((sa[i] - sb[j]).abs());
            u = next;
            if ua <= next {
                i += 1;
            }
            if ub <= next {
                j += 1;
            }
        }
        acc
    };
    Ok(if p == 1 { integral } else { integral.sqrt() })
}

/// Sliced quadratic transport estimate for point clouds in d > 1 (also valid
/// at d = 1, where it reduces to the exact distance): root of d times the
/// mean of squared 1D distances along random orthonormal direction frames.
/// The direction count is rounded up to whole frames, which makes the
/// estimate exact for translations. This is an estimator of W2, not W2
/// itself.
pub fn sliced_w2(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    n_directions: usize,
    seed: u64,
) -> Result<f64> {
    if n_directions == 0 {
        return Err(Error::InvalidParameter(
            "need at least one direction".into(),
        ));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let d = a.ncols();
    if b.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: b.ncols(),
        });
    }
    let frames = n_directions.div_ceil(d);
    let mut rng = stream_rng(seed, &[tag::DIAG, 2]);
    let mut acc = 0.0;
    let mut used = 0usize;
    for _ in 0..frames {
        let frame = random_orthonormal_frame(d, &mut rng);
        for col in frame.columns() {
            let pa: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&col)).collect();
            let pb: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&col)).collect();
            let w2 = wasserstein_1d(&pa, &pb, 2)?;
            acc += w2 * w2;
            used += 1;
        }
    }
    Ok((d as f64 * acc / used as f64).sqrt())
}

/// Random rotation via Gram-Schmidt on a Gaussian matrix; columns are the
/// frame directions.
fn random_orthonormal_frame(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    loop {
        let mut m = Array2::zeros((d, d));
        for v in m.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let mut ok = true;
        for j in 0..d {
            for k in 0..j {
                let proj: f64 = m.column(j).dot(&m.column(k));
                let prev = m.column(k).to_owned();
                m.column_mut(j).scaled_add(-proj, &prev);
            }
            let norm = m.column(j).dot(&m.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return m;
        }
    }
}

/// Mean squared norm per time node.
pub fn second_moments(ens: &TrajectoryEnsemble) -> Vec<f64> {
    (0..ens.grid.n_nodes())
        .map(|m| {
            let cloud = ens.node_view(m);
            cloud.rows().into_iter().map(|r| r.dot(&r)).sum::<f64>() / cloud.nrows() as f64
        })
        .collect()
}

/// Ordinary least-squares slope of per-node values against node times.
pub fn second_moment_slope(grid: &TimeGrid, values: &[f64]) -> Result<f64> {
    if values.len() != grid.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: grid.n_nodes(),
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let tbar = (0..values.len()).map(|m| grid.node(m)).sum::<f64>() / n;
    let ybar = values.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (m, y) in values.iter().enumerate() {
        let dt = grid.node(m) - tbar;
        num += dt * (y - ybar);
        den += dt * dt;
    }
    Ok(num / den)
}

/// Law map: push `k_phi` particles drawn from `mu_bar` through the problem's
/// dynamics with the *given* measure flow (no self-interaction), returning
/// the empirical node measures of the result. Deterministic in `seed`.
pub fn phi_map(
    problem: &ProblemSpec,
    law: &dyn crate::density::LawFlow,
    mu_bar: &InitFn,
    k_phi: usize,
    seed: u64,
    parallel: bool,
) -> Result<TrajectoryEnsemble> {
    let noise = NoiseSource::new(problem.noise_kind, problem.dim(), seed)?;
    simulate_batch(
        &problem.dynamics,
        &SimParams {
            law,
            init: mu_bar,
            noise: &noise,
            grid: &problem.grid,
            n_particles: k_phi,
            seed,
            epoch: 0,
            parallel,
        },
    )
}

/// Estimator settings for [`h_alpha`]: the exponential weight and, above one
/// dimension, the sliced-transport configuration.
#[derive(Clone, Copy, Debug)]
pub struct HAlphaParams {
    pub alpha: f64,
    pub n_directions: usize,
    pub seed: u64,
}

/// Exponentially weighted path distance between two measure flows:
/// sqrt(trapezoid over elapsed node times of exp(-alpha t) W2^2(mu_t, nu_t)).
/// W2 per node is exact in 1D and the sliced estimate in d > 1.
pub fn h_alpha(
    mu: &TrajectoryEnsemble,
    nu: &TrajectoryEnsemble,
    p: &HAlphaParams,
) -> Result<f64> {
    if !(p.alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "exponential weight must be positive, got {}",
            p.alpha
        )));
    }
    let grid = &mu.grid;
    if nu.grid.n_nodes() != grid.n_nodes() || (nu.grid.dt() - grid.dt()).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "measure flows live on different grids: {} vs {} nodes, dt {} vs {}",
            grid.n_nodes(),
            nu.grid.n_nodes(),
            grid.dt(),
            nu.grid.dt()
        )));
    }
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    let d = mu.dim();
    let mut integral = 0.0;
    for m in 0..grid.n_nodes() {
        let w2sq = if d == 1 {
            let am = mu.node_view(m);
            let bm = nu.node_view(m);
            let a: Vec<f64> = am.column(0).to_vec();
            let b: Vec<f64> = bm.column(0).to_vec();
            let w = wasserstein_1d(&a, &b, 2)?;
            w * w
        } else {
            let w = sliced_w2(&mu.node_view(m), &nu.node_view(m), p.n_directions, p.seed)?;
            w * w
        };
        let weight = (-p.alpha * grid.elapsed(m)).exp();
        let trap = if m == 0 || m == grid.n_nodes() - 1 {
            0.5
        } else {
            1.0
        };
        integral += trap * weight * w2sq * grid.dt();
    }
    Ok(integral.sqrt())
}

/// The fixed-point constant 2(T+1)C^2 from the posterior estimate.
pub fn c_zero(c_lip: f64, t_horizon: f64) -> f64 {
    2.0 * (t_horizon + 1.0) * c_lip * c_lip
}

/// One-step contraction factor sqrt(C0/(alpha - C0)) of the law map in the
/// weighted path distance; < 1 exactly when alpha > 2 C0.
pub fn contraction_factor(alpha: f64, c_lip: f64, t_horizon: f64) -> Result<f64> {
    let c0 = c_zero(c_lip, t_horizon);
    if !(alpha > c0) {
        return Err(Error::InvalidParameter(format!(
            "contraction needs alpha > C0 = {c0}, got {alpha}"
        )));
    }
    Ok((c0 / (alpha - c0)).sqrt())
}

/// Posterior error estimate: from the self-distance H_alpha(mu, Phi mu), the
/// distance to the true fixed point is bounded by
/// (1 - sqrt(C0/(alpha - C0)))^{-1} times the self-distance, valid for
/// alpha > 2 C0.
pub fn posterior_bound(h_self: f64, alpha: f64, c_lip: f64, t_horizon: f64) -> Result<f64> {
    if !(h_self >= 0.0) || !h_self.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "self-distance must be finite and nonnegative, got {h_self}"
        )));
    }
    let c0 = c_zero(c_lip, t_horizon);
    if !(alpha > 2.0 * c0) {
        return Err(Error::InvalidParameter(format!(
            "posterior bound needs alpha > 2 C0 = {}, got {alpha}",
            2.0 * c0
        )));
    }
    let q = contraction_factor(alpha, c_lip, t_horizon)?;
    Ok(h_self / (1.0 - q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::EmpiricalFlow;
    use crate::noise::NoiseKind;
    use crate::problems::{gaussian_init, linear};
    use crate::sde::{Dynamics, SigmaBatch};
    use ndarray::{array, Array3, Axis};
    use rand::Rng;

    #[test]
    fn relative_error_hits_the_three_pinned_values() {
        let domain = Domain::cube(1, 2.0).unwrap();
        let reference = |xs: &ArrayView2<f64>| -> Result<Array1<f64>> {
            Ok(xs.column(0).mapv(|x| 1.0 + x * x))
        };
        let c0 = 2.5;
        let exact = move |xs: &ArrayView2<f64>| -> Result<Array1<f64>> {
            Ok(xs.column(0).mapv(|x| (1.0 + x * x) / c0))
        };
        let zero = |xs: &ArrayView2<f64>| -> Result<Array1<f64>> {
            Ok(Array1::zeros(xs.nrows()))
        };
        let scaled = move |xs: &ArrayView2<f64>| -> Result<Array1<f64>> {
            Ok(xs.column(0).mapv(|x| 1.1 * (1.0 + x * x) / c0))
        };
        let e0 = relative_l2(&exact, &reference, &domain, 20_000, c0, 7).unwrap();
        assert!(e0 < 1e-14, "exact model gives {e0}");
        let e1 = relative_l2(&zero, &reference, &domain, 20_000, c0, 7).unwrap();
        assert!((e1 - 1.0).abs() < 1e-14, "zero model gives {e1}");
        let e2 = relative_l2(&scaled, &reference, &domain, 20_000, c0, 7).unwrap();
        assert!((e2 - 0.1).abs() < 1e-12, "1.1x model gives {e2}");
        let err = relative_l2(&exact, &zero, &domain, 100, 1.0, 7).unwrap_err();
        assert!(matches!(err, Error::DegenerateDensity(_)));
    }

    #[test]
    fn transport_on_the_line_handles_atoms_shifts_and_unequal_counts() {
        assert_eq!(wasserstein_1d(&[0.3, -1.0], &[-1.0, 0.3], 1).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0], &[1.0], 1).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[0.0], &[1.0], 2).unwrap(), 1.0);
        // Two atoms against one: quantile gap is 0.5 everywhere.
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.5], 1).unwrap() - 0.5).abs() < 1e-15);
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.5], 2).unwrap() - 0.5).abs() < 1e-15);
        // Symmetry is exact.
        let a = [0.1, 0.7, -0.3, 2.0];
        let b = [0.0, 1.5, -1.0];
        assert_eq!(
            wasserstein_1d(&a, &b, 2).unwrap(),
            wasserstein_1d(&b, &a, 2).unwrap()
        );
        assert!(wasserstein_1d(&[], &[0.0], 1).is_err());
        assert!(wasserstein_1d(&[0.0], &[1.0], 3).is_err());
    }

    #[test]
    fn translated_gaussian_sample_recovers_the_shift() {
        let n = 100_000;
        let mut rng = stream_rng(5, &[81]);
        let theta = 0.7;
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for i in 0..n {
            a[i] = StandardNormal.sample(&mut rng);
            let z: f64 = StandardNormal.sample(&mut rng);
            b[i] = theta + z;
        }
        let w1 = wasserstein_1d(&a, &b, 1).unwrap();
        assert!((w1 - theta).abs() < 0.02, "w1 = {w1}, want ~{theta}");
    }

    #[test]
    fn sliced_transport_is_exact_for_translations_and_gaussian_scaling() {
        let mut rng = stream_rng(9, &[4]);
        let n = 4000;
        let mut a = Array2::zeros((n, 2));
        for v in a.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        // Translation: exact for whole frames regardless of direction count.
        let v = [0.3, -0.4];
        let mut b = a.clone();
        for mut row in b.rows_mut() {
            row[0] += v[0];
            row[1] += v[1];
        }
        let est = sliced_w2(&a.view(), &b.view(), 6, 3).unwrap();
        assert!((est - 0.5).abs() < 1e-12, "translation gives {est}");
        assert_eq!(sliced_w2(&a.view(), &a.view(), 4, 3).unwrap(), 0.0);

        // N(0, I) vs N(0, 4I): true quadratic distance is sqrt(2).
        let mut c2 = Array2::zeros((n, 2));
        for v in c2.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = 2.0 * z;
        }
        let est = sliced_w2(&a.view(), &c2.view(), 128, 3).unwrap();
        let want = std::f64::consts::SQRT_2;
        assert!(
            (est - want).abs() < 0.1 * want,
            "scaling gives {est}, want ~{want}"
        );
    }

    #[test]
    fn slope_regression_is_exact_on_lines_and_robust_to_noise() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let line: Vec<f64> = (0..11).map(|m| 0.4 + 2.0 * grid.node(m)).collect();
        let s = second_moment_slope(&grid, &line).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        let flat = vec![0.7; 11];
        assert!(second_moment_slope(&grid, &flat).unwrap().abs() < 1e-15);

        // The curvature-free growth rate of the aggregation benchmark.
        let target = 4.0 - 1.0 / (2.0 * std::f64::consts::PI);
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let mut rng = stream_rng(2, &[5]);
        let noisy: Vec<f64> = (0..101)
            .map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                1.0 + target * grid.node(m) + 0.01 * z
            })
            .collect();
        let s = second_moment_slope(&grid, &noisy).unwrap();
        assert!((s - target).abs() < 0.02, "slope {s}, want ~{target}");
        assert!(second_moment_slope(&grid, &noisy[..5]).is_err());
    }

    fn delta_init(at: f64) -> InitFn {
        Box::new(move |n, _rng| Ok(Array2::from_elem((n, 1), at)))
    }

    fn free_problem(sigma: f64, grid: TimeGrid) -> ProblemSpec {
        ProblemSpec {
            name: "free".into(),
            domain: Domain::cube(1, 6.0).unwrap(),
            grid,
            noise_kind: if sigma == 0.0 {
                NoiseKind::None
            } else {
                NoiseKind::Brownian
            },
            dynamics: Dynamics {
                drift: Box::new(|_t, _off, xs, _law, _ctx| Ok(Array2::zeros(xs.dim()))),
                sigma: Box::new(move |_t, xs, _law, _ctx| {
                    Ok(SigmaBatch::Scalar(Array1::from_elem(xs.nrows(), sigma)))
                }),
                prepare_node: None,
            },
            init: gaussian_init(vec![0.0], 1.0),
            reference: None,
        }
    }

    fn const_flow(grid: &TimeGrid, cloud: Array2<f64>) -> EmpiricalFlow {
        EmpiricalFlow::new(grid.clone(), vec![cloud; grid.n_nodes()]).unwrap()
    }

    #[test]
    fn law_map_is_frozen_dynamics_and_matches_brownian_variance() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let still = free_problem(0.0, grid.clone());
        let law = const_flow(&grid, array![[0.0]]);
        let init = delta_init(0.25);
        let out = phi_map(&still, &law, &init, 50, 3, false).unwrap();
        for m in 0..grid.n_nodes() {
            assert!(out.node_view(m).iter().all(|&v| v == 0.25));
        }

        let noisy = free_problem(1.0, grid.clone());
        let init = delta_init(0.0);
        let out = phi_map(&noisy, &law, &init, 100_000, 3, false).unwrap();
        let moments = second_moments(&out);
        for m in 1..grid.n_nodes() {
            let t = grid.elapsed(m);
            assert!(
                (moments[m] - t).abs() < 0.03 * t,
                "variance at node {m} is {} for t = {t}",
                moments[m]
            );
        }
        let again = phi_map(&noisy, &law, &delta_init(0.0), 100_000, 3, false).unwrap();
        assert_eq!(out.states, again.states);
    }

    fn ensemble_from(grid: &TimeGrid, nodes: Vec<Array2<f64>>) -> TrajectoryEnsemble {
        let k = nodes[0].nrows();
        let d = nodes[0].ncols();
        let mut states = Array3::zeros((nodes.len(), k, d));
        for (m, c) in nodes.iter().enumerate() {
            states.index_axis_mut(Axis(0), m).assign(c);
        }
        TrajectoryEnsemble {
            grid: grid.clone(),
            states,
        }
    }

    #[test]
    fn weighted_path_distance_matches_the_constant_integrand_value() {
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let n = grid.n_nodes();
        let mu = ensemble_from(&grid, vec![array![[0.0]]; n]);
        let nu = ensemble_from(&grid, vec![array![[1.0]]; n]);
        let p = HAlphaParams {
            alpha: 1.0,
            n_directions: 8,
            seed: 0,
        };
        assert_eq!(h_alpha(&mu, &mu, &p).unwrap(), 0.0);
        let h = h_alpha(&mu, &nu, &p).unwrap();
        let analytic = ((1.0 - (-1.0f64).exp()) / 1.0).sqrt();
        assert!(
            (h - analytic).abs() < 1e-4,
            "constant point masses give {h}, analytic {analytic}"
        );
        assert_eq!(
            h_alpha(&mu, &nu, &p).unwrap(),
            h_alpha(&nu, &mu, &p).unwrap()
        );
        let other = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let bad = ensemble_from(&other, vec![array![[0.0]]; other.n_nodes()]);
        assert!(h_alpha(&mu, &bad, &p).is_err());
    }

    #[test]
    fn weighted_path_distance_satisfies_the_triangle_inequality() {
        let grid = TimeGrid::new(0.0, 0.5, 6).unwrap();
        let n = grid.n_nodes();
        let mut rng = stream_rng(17, &[1]);
        let mut random_flow = || {
            let nodes: Vec<Array2<f64>> = (0..n)
                .map(|_| {
                    let mut c = Array2::zeros((40, 1));
                    for v in c.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = 0.8 * z + 0.3;
                    }
                    c
                })
                .collect();
            ensemble_from(&grid, nodes)
        };
        let (mu, nu, xi) = (random_flow(), random_flow(), random_flow());
        let p = HAlphaParams {
            alpha: 2.0,
            n_directions: 8,
            seed: 0,
        };
        let lhs = h_alpha(&mu, &xi, &p).unwrap();
        let rhs = h_alpha(&mu, &nu, &p).unwrap() + h_alpha(&nu, &xi, &p).unwrap();
        assert!(lhs <= rhs + 1e-12, "triangle violated: {lhs} > {rhs}");
    }

    #[test]
    fn posterior_bound_arithmetic_and_hypothesis_guard() {
        // alpha = 5 C0 makes the multiplier exactly 2.
        let c_lip = 1.3;
        let t = 0.7;
        let c0 = c_zero(c_lip, t);
        let b = posterior_bound(0.1, 5.0 * c0, c_lip, t).unwrap();
        assert!((b - 0.2).abs() < 1e-15, "bound {b}");
        assert_eq!(posterior_bound(0.0, 5.0 * c0, c_lip, t).unwrap(), 0.0);
        assert!(posterior_bound(0.1, 2.0 * c0, c_lip, t).is_err());
        assert!(posterior_bound(f64::NAN, 5.0 * c0, c_lip, t).is_err());

        // Monotone: increasing in the self-distance, decreasing in alpha.
        let mut prev = 0.0;
        for h in [0.1, 0.2, 0.5, 1.0] {
            let b = posterior_bound(h, 5.0 * c0, c_lip, t).unwrap();
            assert!(b > prev);
            prev = b;
        }
        let mut prev = f64::INFINITY;
        for mult in [2.5, 3.0, 5.0, 10.0] {
            let b = posterior_bound(0.3, mult * c0, c_lip, t).unwrap();
            assert!(b < prev);
            prev = b;
        }
    }

    /// The law map contracts measure flows at rate sqrt(C0/(alpha-C0)) under
    /// synchronous coupling (same initial draw, same noise), checked on the
    /// linear mean-field dynamics whose Lipschitz constant is known.
    #[test]
    fn law_map_contracts_in_the_weighted_path_distance() {
        let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
        let problem = linear::build(Domain::cube(1, 6.0).unwrap(), grid.clone()).unwrap();
        let t = 0.5;
        let c0 = c_zero(linear::C_LIP, t);
        let alpha = 5.0 * c0;
        let factor = contraction_factor(alpha, linear::C_LIP, t).unwrap();
        assert!((factor - 0.5).abs() < 1e-15);

        let n = grid.n_nodes();
        let k = 4000;
        let mut rng = stream_rng(23, &[2]);
        let p = HAlphaParams {
            alpha,
            n_directions: 8,
            seed: 0,
        };
        for pair in 0..5 {
            let s1: f64 = rng.random_range(-0.5..0.5);
            let s2: f64 = rng.random_range(-0.5..0.5);
            let mut random_flow = |shift: f64, scale: f64| {
                let nodes: Vec<Array2<f64>> = (0..n)
                    .map(|_| {
                        let mut c = Array2::zeros((k, 1));
                        for v in c.iter_mut() {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *v = scale * z + shift;
                        }
                        c
                    })
                    .collect();
                nodes
            };
            let mu_nodes = random_flow(s1, 0.6);
            let nu_nodes = random_flow(s2, 1.1);
            let mu = EmpiricalFlow::new(grid.clone(), mu_nodes.clone()).unwrap();
            let nu = EmpiricalFlow::new(grid.clone(), nu_nodes.clone()).unwrap();

            let seed = 100 + pair;
            let phi_mu = phi_map(&problem, &mu, &problem.init, k, seed, false).unwrap();
            let phi_nu = phi_map(&problem, &nu, &problem.init, k, seed, false).unwrap();

            let h_in = h_alpha(
                &ensemble_from(&grid, mu_nodes),
                &ensemble_from(&grid, nu_nodes),
                &p,
            )
            .unwrap();
            let h_out = h_alpha(&phi_mu, &phi_nu, &p).unwrap();
            assert!(
                h_out <= factor * h_in * 1.05,
                "pair {pair}: {h_out} vs {} * {h_in}",
                factor
            );
        }
    }

    #[test]
    fn report_validation_flags_bad_entries() {
        let ok = MetricReport {
            epoch: 3,
            relative_l2: 0.2,
            w1: Some(0.1),
            second_moment_slope: Some(-0.5),
            posterior_h_alpha: None,
            posterior_bound: None,
        };
        assert!(ok.validate().is_ok());
        let bad = MetricReport {
            relative_l2: -0.1,
            ..ok
        };
        assert!(bad.validate().is_err());
        let bad = MetricReport {
            w1: Some(f64::INFINITY),
            ..ok
        };
        assert!(bad.validate().is_err());
    }
}
