//! The three training objectives. Each returns its scalar value together
//! with the full parameter gradient; the mollified batch table is always
//! treated as a constant (gradients never flow back through the simulation
//! that produced the particles).

use ndarray::{Array1, Array2, ArrayView2};

use crate::density::{DensityModel, QuadSpec, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::sde::TrajectoryEnsemble;

/// Loss value, parameter gradient, and the number of log evaluations that
/// hit the positivity floor.
pub struct LossOut {
    pub value: f64,
    pub grad: Vec<f64>,
    pub clamped_logs: u64,
}

fn check_tables(
    grid: &TimeGrid,
    sets: &[Array2<f64>],
    table: &[Array1<f64>],
    dim: usize,
) -> Result<()> {
    if sets.len() != grid.n_nodes() || table.len() != grid.n_nodes() {
        return Err(Error::InvalidParameter(format!(
            "need one training set and one batch-density row per node: {} nodes, {} sets, {} rows",
            grid.n_nodes(),
            sets.len(),
            table.len()
        )));
    }
    for (m, (s, k)) in sets.iter().zip(table).enumerate() {
        if s.nrows() == 0 {
            return Err(Error::InvalidParameter(format!(
                "empty training set at node {m}"
            )));
        }
        if s.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.ncols(),
            });
        }
        if k.len() != s.nrows() {
            return Err(Error::InvalidParameter(format!(
                "batch-density row at node {m} has {} entries for {} points",
                k.len(),
                s.nrows()
            )));
        }
    }
    Ok(())
}

/// Squared-distance objective
/// `sum_m (1/|S_m|) sum_{x in S_m} (raw(t_m, x) - rho_hat_m(x))^2`,
/// evaluated on the model's raw output. `divide_by_nodes` additionally
/// divides by the node count (a pure rescaling, off by default).
pub fn loss_sq(
    model: &dyn DensityModel,
    grid: &TimeGrid,
    sets: &[Array2<f64>],
    kde: &[Array1<f64>],
    divide_by_nodes: bool,
) -> Result<LossOut> {
    check_tables(grid, sets, kde, model.dim())?;
    let node_scale = if divide_by_nodes {
        1.0 / grid.n_nodes() as f64
    } else {
        1.0
    };
    let mut value = 0.0;
    let mut grad = vec![0.0; model.param_len()];
    for m in 0..grid.n_nodes() {
        let t = grid.elapsed(m);
        let xs = sets[m].view();
        let raw = model.raw_eval_batch(t, &xs);
        let scale = node_scale / xs.nrows() as f64;
        let resid = &raw - &kde[m];
        value += scale * resid.iter().map(|r| r * r).sum::<f64>();
        let ws = resid.mapv(|r| 2.0 * scale * r);
        model.accumulate_raw_grad(t, &xs, &ws.view(), &mut grad);
    }
    Ok(LossOut {
        value,
        grad,
        clamped_logs: 0,
    })
}

/// Importance weighting of the cross-entropy objective.
pub enum KlWeights<'a> {
    /// Points drawn uniformly on the window; the window volume is absorbed
    /// into the objective's scale, matching the squared-distance convention.
    Uniform,
    /// Points drawn from a known density; its (detached) values at the
    /// training points divide the weights.
    Eta(&'a [Array1<f64>]),
    /// Points drawn from the mollified batch itself: the density ratio is
    /// identically one.
    Unit,
}

/// Cross-entropy objective
/// `- sum_m (1/|S_m|) sum_{x in S_m} w(x) log rho_model(t_m, x)` with
/// `w = rho_hat / eta`. Models with exact densities use their exact log;
/// raw models are rectified on the window (positive part, normalized by a
/// quadrature mass) with logs floored at a small positive constant. Floored
/// points are counted and contribute zero gradient.
pub fn loss_kl(
    model: &dyn DensityModel,
    grid: &TimeGrid,
    sets: &[Array2<f64>],
    kde: &[Array1<f64>],
    weighting: &KlWeights<'_>,
    quad: &QuadSpec,
) -> Result<LossOut> {
    check_tables(grid, sets, kde, model.dim())?;
    if let KlWeights::Eta(eta) = weighting {
        check_tables(grid, sets, eta, model.dim())?;
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; model.param_len()];
    let mut clamped = 0u64;
    let exact = model.caps().exact_density;
    // Rectification quadrature, shared across nodes.
    let points = if exact {
        None
    } else {
        Some(quad.point_set(model.domain()))
    };
    for m in 0..grid.n_nodes() {
        let t = grid.elapsed(m);
        let xs = sets[m].view();
        let n_inv = 1.0 / xs.nrows() as f64;
        // Detached importance weights w_j >= 0.
        let w: Array1<f64> = match weighting {
            KlWeights::Uniform => kde[m].mapv(|r| r * n_inv),
            KlWeights::Eta(eta) => {
                let mut w = Array1::zeros(xs.nrows());
                for j in 0..xs.nrows() {
                    let e = eta[m][j];
                    if !(e > 0.0) {
                        return Err(Error::InvalidParameter(format!(
                            "importance density must be positive at every training point, got {e} at node {m}"
                        )));
                    }
                    w[j] = kde[m][j] * n_inv / e;
                }
                w
            }
            KlWeights::Unit => Array1::from_elem(xs.nrows(), n_inv),
        };
        if exact {
            let lp = model.exact_log_density_batch(t, &xs).ok_or_else(|| {
                Error::Capability(format!(
                    "{} advertises exact densities but returned none",
                    model.kind_name()
                ))
            })?;
            value -= w.iter().zip(lp.iter()).map(|(w, l)| w * l).sum::<f64>();
            let neg_w = w.mapv(|v| -v);
            model.accumulate_exact_log_grad(t, &xs, &neg_w.view(), &mut grad)?;
        } else {
            let set = points.as_ref().unwrap();
            let raw_q = model.raw_eval_batch(t, &set.points.view());
            let z: f64 = raw_q
                .iter()
                .zip(&set.weights)
                .map(|(r, w)| r.max(0.0) * w)
                .sum();
            if !(z.is_finite() && z > 0.0) {
                return Err(Error::DegenerateDensity(format!(
                    "rectification mass {z} at node {m} is not positive"
                )));
            }
            let raw = model.raw_eval_batch(t, &xs);
            // Unclamped points: rectified density above the log floor.
            let mut point_w = Array1::zeros(xs.nrows());
            let mut w_total = 0.0;
            for j in 0..xs.nrows() {
                let rect = raw[j].max(0.0) / z;
                if rect >= LOG_FLOOR {
                    value -= w[j] * rect.ln();
                    point_w[j] = -w[j] / raw[j];
                    w_total += w[j];
                } else {
                    value -= w[j] * LOG_FLOOR.ln();
                    clamped += 1;
                }
            }
            model.accumulate_raw_grad(t, &xs, &point_w.view(), &mut grad);
            // Normalizer term: + (sum w) dZ/Z, with dZ integrating the raw
            // gradient over the positive region.
            if w_total != 0.0 {
                let zw = Array1::from_iter(
                    raw_q
                        .iter()
                        .zip(&set.weights)
                        .map(|(r, qw)| if *r > 0.0 { w_total * qw / z } else { 0.0 }),
                );
                model.accumulate_raw_grad(t, &set.points.view(), &zw.view(), &mut grad);
            }
        }
    }
    Ok(LossOut {
        value,
        grad,
        clamped_logs: clamped,
    })
}

/// Path likelihood `- sum_m (1/K) sum_i log rho_model(t_m, X^i_{t_m})`;
/// needs a model with an exact density, uses no mollification and no
/// training-point sampling.
pub fn loss_path(model: &dyn DensityModel, ensemble: &TrajectoryEnsemble) -> Result<LossOut> {
    let grid = &ensemble.grid;
    let k = ensemble.n_particles();
    if k == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; model.param_len()];
    for m in 0..grid.n_nodes() {
        let t = grid.elapsed(m);
        let xs = ensemble.node_view(m);
        let lp = model.exact_log_density_batch(t, &xs).ok_or_else(|| {
            Error::Capability(format!(
                "path likelihood needs an exact density; {} reports none",
                model.kind_name()
            ))
        })?;
        for (i, l) in lp.iter().enumerate() {
            if !l.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite log-density for particle {i} at node {m}"
                )));
            }
            value -= l / k as f64;
        }
        let w = Array1::from_elem(k, -1.0 / k as f64);
        model.accumulate_exact_log_grad(t, &xs, &w.view(), &mut grad)?;
    }
    Ok(LossOut {
        value,
        grad,
        clamped_logs: 0,
    })
}

/// Rectified log-density values of a model at given points (the same
/// flooring convention as `loss_kl`), for diagnostics and tests.
pub fn rectified_log_values(
    model: &dyn DensityModel,
    t: f64,
    xs: &ArrayView2<f64>,
    quad: &QuadSpec,
) -> Result<(Array1<f64>, u64)> {
    if model.caps().exact_density {
        if let Some(lp) = model.exact_log_density_batch(t, xs) {
            return Ok((lp, 0));
        }
    }
    let set = quad.point_set(model.domain());
    let raw_q = model.raw_eval_batch(t, &set.points.view());
    let z: f64 = raw_q
        .iter()
        .zip(&set.weights)
        .map(|(r, w)| r.max(0.0) * w)
        .sum();
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::DegenerateDensity(format!(
            "rectification mass {z} is not positive"
        )));
    }
    let raw = model.raw_eval_batch(t, xs);
    let mut clamped = 0;
    let vals = raw.mapv(|r| {
        let rect = r.max(0.0) / z;
        if rect >= LOG_FLOOR {
            rect.ln()
        } else {
            clamped += 1;
            LOG_FLOOR.ln()
        }
    });
    Ok((vals, clamped))
}
