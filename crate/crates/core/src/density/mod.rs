//! Parametric density models and the frozen, rectified view of them that the
//! simulation layer consumes.
//!
//! A [`DensityModel`] exposes a *raw* scalar field (a network output, a cosine
//! series, or an exact pdf) plus flat parameters and hand-written
//! reverse-mode accumulation. [`FrozenDensity`] wraps a model for one epoch:
//! it rectifies (clip at zero, normalize over the domain window), caches
//! per-node normalizers and sampling envelopes, and counts clamps and
//! acceptance statistics. Dynamics closures never see model internals — they
//! talk to the [`LawFlow`] trait, which is also implemented by node-indexed
//! empirical measures.

mod checkpoint;
mod flow;
mod fourier;
mod mlp;

pub use checkpoint::{
    load_model, load_model_file, save_model, save_model_file, Checkpoint, CHECKPOINT_VERSION,
};
pub use flow::CouplingFlowDensity;
pub use fourier::{fourier_update, FourierDensity};
pub use mlp::MlpDensity;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::quad::monte_carlo;

/// Log floor for rectified-density logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capabilities {
    /// Raw output is already a normalized pdf (no rectification needed).
    pub exact_density: bool,
    /// Can sample without accept-reject.
    pub direct_sampling: bool,
    /// Has spatial gradients (smooth activation).
    pub spatial_gradient: bool,
}

/// A time-dependent parametric scalar field trained toward a density.
///
/// Time inputs are *elapsed* times in `[0, horizon]`. Raw output may be
/// negative for non-exact models; rectification happens in [`FrozenDensity`].
pub trait DensityModel: Send + Sync {
    fn dim(&self) -> usize;
    fn domain(&self) -> &Domain;
    fn caps(&self) -> Capabilities;
    fn kind_name(&self) -> &'static str;

    fn raw_eval_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Array1<f64>;

    /// Exact log-density, for models whose raw output is a pdf.
    fn exact_log_density_batch(&self, _t: f64, _xs: &ArrayView2<f64>) -> Option<Array1<f64>> {
        None
    }

    /// Adds d/dtheta of sum_j w_j * raw(t, x_j) into `grad`.
    fn accumulate_raw_grad(
        &self,
        t: f64,
        xs: &ArrayView2<f64>,
        ws: &ArrayView1<f64>,
        grad: &mut [f64],
    );

    /// Adds d/dtheta of sum_j w_j * log p(t, x_j) into `grad` (exact models).
    fn accumulate_exact_log_grad(
        &self,
        _t: f64,
        _xs: &ArrayView2<f64>,
        _ws: &ArrayView1<f64>,
        _grad: &mut [f64],
    ) -> Result<()> {
        Err(Error::Capability(format!(
            "{} has no exact log-density",
            self.kind_name()
        )))
    }

    /// Spatial gradient of the raw output.
    fn raw_spatial_grad_batch(&self, _t: f64, _xs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Err(Error::Capability(format!(
            "{} has no spatial gradient",
            self.kind_name()
        )))
    }

    fn direct_sample(&self, _t: f64, _n: usize, _rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        Err(Error::Capability(format!(
            "{} cannot sample directly",
            self.kind_name()
        )))
    }

    /// Mutable access to the closed-form basis representation, for the
    /// squared-loss pathway that mixes coefficients without the gradient
    /// engine.
    fn fourier_view(&mut self) -> Option<&mut FourierDensity> {
        None
    }

    /// Shared access to the closed-form basis representation (projection
    /// only needs `&self`).
    fn fourier_ref(&self) -> Option<&FourierDensity> {
        None
    }

    fn param_len(&self) -> usize;
    fn params_vec(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]) -> Result<()>;

    /// Architecture metadata for checkpoints.
    fn arch_json(&self) -> serde_json::Value;
}

/// How normalizers and sampling envelopes are computed over the domain:
/// tensor scan grid up to 3 dimensions, seeded Monte Carlo above.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadSpec {
    pub scan_per_axis: usize,
    pub mc_points: usize,
    pub seed: u64,
}

impl Default for QuadSpec {
    fn default() -> Self {
        QuadSpec {
            scan_per_axis: 512,
            mc_points: 100_000,
            seed: 0,
        }
    }
}

const SCAN_CAP_TOTAL: usize = 1 << 20;

impl QuadSpec {
    pub fn effective_per_axis(&self, dim: usize) -> usize {
        let cap = (SCAN_CAP_TOTAL as f64).powf(1.0 / dim as f64).floor() as usize;
        self.scan_per_axis.min(cap).max(2)
    }

    pub(crate) fn point_set(&self, domain: &Domain) -> crate::quad::TensorQuad {
        if domain.dim() <= 3 {
            let (pts, w) = domain.midpoint_grid(self.effective_per_axis(domain.dim()));
            let n = pts.nrows();
            crate::quad::TensorQuad {
                points: pts,
                weights: vec![w; n],
            }
        } else {
            monte_carlo(domain, self.mc_points, self.seed)
        }
    }
}

/// Standalone rectification of an arbitrary scalar field on a window:
/// R(f) = (f v 0) / Z with Z the quadrature mass of (f v 0). Returns the
/// rectified evaluator and Z.
pub fn rectify<'f>(
    f: &'f (dyn Fn(&ArrayView2<f64>) -> Array1<f64> + Sync),
    domain: &Domain,
    quad: &QuadSpec,
) -> Result<(impl Fn(&ArrayView2<f64>) -> Array1<f64> + Sync + 'f, f64)> {
    let set = quad.point_set(domain);
    let vals = f(&set.points.view());
    let z: f64 = vals
        .iter()
        .zip(&set.weights)
        .map(|(v, w)| v.max(0.0) * w)
        .sum();
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::DegenerateDensity(format!(
            "rectification normalizer {z} is not positive"
        )));
    }
    let g = move |xs: &ArrayView2<f64>| -> Array1<f64> { f(xs).mapv(|v| v.max(0.0) / z) };
    Ok((g, z))
}

#[derive(Debug, Default)]
pub struct FrozenStats {
    pub clamped_logs: AtomicU64,
    pub proposals: AtomicU64,
    pub accepted: AtomicU64,
    pub envelope_rebuilds: AtomicU64,
}

impl FrozenStats {
    pub fn acceptance_rate(&self) -> f64 {
        let p = self.proposals.load(Ordering::Relaxed);
        if p == 0 {
            1.0
        } else {
            self.accepted.load(Ordering::Relaxed) as f64 / p as f64
        }
    }
}

/// One epoch's frozen view of a model: rectified evaluation, clamped logs,
/// accept-reject sampling, lazy per-node caches. Nothing here touches model
/// parameters, so simulation through a frozen view never backpropagates.
pub struct FrozenDensity<'m> {
    model: &'m dyn DensityModel,
    grid: TimeGrid,
    quad: QuadSpec,
    points: OnceLock<crate::quad::TensorQuad>,
    normalizers: Vec<OnceLock<f64>>,
    envelopes: Mutex<HashMap<usize, f64>>,
    pub stats: FrozenStats,
    max_tries: usize,
}

impl<'m> FrozenDensity<'m> {
    pub fn new(model: &'m dyn DensityModel, grid: TimeGrid, quad: QuadSpec) -> Self {
        let n = grid.n_nodes();
        FrozenDensity {
            model,
            grid,
            quad,
            points: OnceLock::new(),
            normalizers: (0..n).map(|_| OnceLock::new()).collect(),
            envelopes: Mutex::new(HashMap::new()),
            stats: FrozenStats::default(),
            max_tries: 1000,
        }
    }

    pub fn model(&self) -> &'m dyn DensityModel {
        self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn point_set(&self) -> &crate::quad::TensorQuad {
        self.points
            .get_or_init(|| self.quad.point_set(self.model.domain()))
    }

    /// Mass of (raw v 0) over the window at the node nearest to elapsed `t`.
    pub fn normalizer(&self, t: f64) -> Result<f64> {
        if self.model.caps().exact_density {
            return Ok(1.0);
        }
        let node = self.grid.nearest_node(t);
        let z = *self.normalizers[node].get_or_init(|| {
            let set = self.point_set();
            let vals = self.model.raw_eval_batch(self.grid.elapsed(node), &set.points.view());
            vals.iter()
                .zip(&set.weights)
                .map(|(v, w)| v.max(0.0) * w)
                .sum()
        });
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::DegenerateDensity(format!(
                "normalizer {z} at node {node}"
            )));
        }
        Ok(z)
    }

    /// Rectified density (exact models pass through).
    pub fn eval_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Result<Array1<f64>> {
        let raw = self.model.raw_eval_batch(t, xs);
        if self.model.caps().exact_density {
            return Ok(raw);
        }
        let z = self.normalizer(t)?;
        Ok(raw.mapv(|v| v.max(0.0) / z))
    }

    /// Log of the rectified density, clamped below at [`LOG_FLOOR`]; clamped
    /// evaluations are counted in `stats.clamped_logs`.
    pub fn log_eval_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Result<Array1<f64>> {
        if let Some(lp) = self.model.exact_log_density_batch(t, xs) {
            return Ok(lp);
        }
        let vals = self.eval_batch(t, xs)?;
        let mut clamped = 0u64;
        let out = vals.mapv(|v| {
            if v <= LOG_FLOOR {
                clamped += 1;
                LOG_FLOOR.ln()
            } else {
                v.ln()
            }
        });
        self.stats.clamped_logs.fetch_add(clamped, Ordering::Relaxed);
        Ok(out)
    }

    /// Spatial gradient of the rectified density: raw gradient / Z where raw
    /// is positive, zero on the clipped region.
    pub fn grad_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut g = self.model.raw_spatial_grad_batch(t, xs)?;
        if self.model.caps().exact_density {
            return Ok(g);
        }
        let z = self.normalizer(t)?;
        let raw = self.model.raw_eval_batch(t, xs);
        for (mut row, r) in g.rows_mut().into_iter().zip(raw.iter()) {
            if *r > 0.0 {
                row.mapv_inplace(|v| v / z);
            } else {
                row.fill(0.0);
            }
        }
        Ok(g)
    }

    fn envelope(&self, node: usize) -> Result<f64> {
        if let Some(e) = self.envelopes.lock().unwrap().get(&node) {
            return Ok(*e);
        }
        let set = self.point_set();
        let vals = self
            .model
            .raw_eval_batch(self.grid.elapsed(node), &set.points.view());
        let max = vals.iter().fold(0.0f64, |m, v| m.max(*v));
        if !(max.is_finite() && max > 0.0) {
            return Err(Error::DegenerateDensity(format!(
                "no positive density found on the scan grid at node {node}"
            )));
        }
        let env = 1.2 * max;
        self.envelopes.lock().unwrap().insert(node, env);
        Ok(env)
    }

    /// Draw from the (rectified) density at elapsed time `t`: direct when the
    /// model supports it, accept-reject with uniform proposals otherwise.
    pub fn sample(&self, t: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        if self.model.caps().direct_sampling {
            return self.model.direct_sample(t, n, rng);
        }
        let node = self.grid.nearest_node(t);
        let te = self.grid.elapsed(node);
        let mut envelope = self.envelope(node)?;
        let target = |xs: &ArrayView2<f64>| self.model.raw_eval_batch(te, xs).mapv(|v| v.max(0.0));
        loop {
            match rejection_sample(
                &target,
                self.model.domain(),
                envelope,
                n,
                self.max_tries,
                rng,
            ) {
                Ok((samples, report)) => {
                    self.stats
                        .proposals
                        .fetch_add(report.proposals, Ordering::Relaxed);
                    self.stats
                        .accepted
                        .fetch_add(report.accepted, Ordering::Relaxed);
                    return Ok(samples);
                }
                Err(RejectionError::EnvelopeViolated { seen }) => {
                    // Stale envelope: re-estimate and restart the draw.
                    envelope = 1.2 * seen;
                    self.envelopes.lock().unwrap().insert(node, envelope);
                    self.stats.envelope_rebuilds.fetch_add(1, Ordering::Relaxed);
                }
                Err(RejectionError::Failed {
                    proposals,
                    accepted,
                }) => {
                    self.stats.proposals.fetch_add(proposals, Ordering::Relaxed);
                    self.stats.accepted.fetch_add(accepted, Ordering::Relaxed);
                    return Err(Error::SamplingFailure {
                        proposals,
                        accepted,
                        rate: accepted as f64 / proposals.max(1) as f64,
                    });
                }
            }
        }
    }
}

pub struct RejectionReport {
    pub proposals: u64,
    pub accepted: u64,
}

enum RejectionError {
    EnvelopeViolated { seen: f64 },
    Failed { proposals: u64, accepted: u64 },
}

/// Accept-reject with uniform proposals on the box against an unnormalized
/// nonnegative target. Fails (never hangs) once `max_tries * n` proposals
/// produced fewer than `n` accepts; reports a stale envelope to the caller
/// instead of silently biasing the draw.
fn rejection_sample(
    target: &(dyn Fn(&ArrayView2<f64>) -> Array1<f64> + Sync),
    domain: &Domain,
    envelope: f64,
    n: usize,
    max_tries: usize,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(Array2<f64>, RejectionReport), RejectionError> {
    use rand::Rng;
    let d = domain.dim();
    let mut out = Array2::zeros((n, d));
    let mut filled = 0usize;
    let mut proposals = 0u64;
    let budget = (max_tries as u64) * (n as u64);
    let chunk = (2 * n).clamp(256, 8192);
    while filled < n {
        if proposals >= budget {
            return Err(RejectionError::Failed {
                proposals,
                accepted: filled as u64,
            });
        }
        let pts = domain.sample_uniform(chunk, rng);
        let us: Vec<f64> = (0..chunk).map(|_| rng.random::<f64>()).collect();
        let vals = target(&pts.view());
        for i in 0..chunk {
            proposals += 1;
            if vals[i] > envelope {
                return Err(RejectionError::EnvelopeViolated { seen: vals[i] });
            }
            if us[i] * envelope < vals[i] {
                out.row_mut(filled).assign(&pts.row(i));
                filled += 1;
                if filled == n {
                    break;
                }
            }
        }
    }
    Ok((
        out,
        RejectionReport {
            proposals,
            accepted: n as u64,
        },
    ))
}

/// Public accept-reject entry point used by model-free callers (tests,
/// initial-condition samplers).
pub fn rejection_sample_fn(
    target: &(dyn Fn(&ArrayView2<f64>) -> Array1<f64> + Sync),
    domain: &Domain,
    envelope: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    match rejection_sample(target, domain, envelope, n, 1000, rng) {
        Ok((s, _)) => Ok(s),
        Err(RejectionError::EnvelopeViolated { seen }) => Err(Error::InvalidParameter(format!(
            "envelope {envelope} below observed target value {seen}"
        ))),
        Err(RejectionError::Failed {
            proposals,
            accepted,
        }) => Err(Error::SamplingFailure {
            proposals,
            accepted,
            rate: accepted as f64 / proposals.max(1) as f64,
        }),
    }
}

/// What dynamics closures see: the current law of the particle system,
/// either a frozen model or a node-indexed empirical measure sequence.
pub trait LawFlow: Sync {
    fn dim(&self) -> usize;
    fn density_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Result<Array1<f64>>;
    fn grad_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Result<Array2<f64>>;
    fn sample(&self, t: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>>;
    /// Mean estimated from `n` samples (exact for empirical node measures).
    fn mean(&self, t: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Array1<f64>>;
}

impl<'m> LawFlow for FrozenDensity<'m> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn density_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Result<Array1<f64>> {
        self.eval_batch(t, xs)
    }

    fn grad_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        FrozenDensity::grad_batch(self, t, xs)
    }

    fn sample(&self, t: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        FrozenDensity::sample(self, t, n, rng)
    }

    fn mean(&self, t: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Array1<f64>> {
        let s = FrozenDensity::sample(self, t, n, rng)?;
        Ok(s.mean_axis(ndarray::Axis(0)).unwrap())
    }
}

/// Node-indexed empirical measure flow (a sample cloud per time node).
pub struct EmpiricalFlow {
    grid: TimeGrid,
    nodes: Vec<Array2<f64>>,
}

impl EmpiricalFlow {
    pub fn new(grid: TimeGrid, nodes: Vec<Array2<f64>>) -> Result<Self> {
        if nodes.len() != grid.n_nodes() {
            return Err(Error::InvalidParameter(format!(
                "need one cloud per node: {} clouds for {} nodes",
                nodes.len(),
                grid.n_nodes()
            )));
        }
        if nodes.iter().any(|c| c.nrows() == 0) {
            return Err(Error::EmptyBatch);
        }
        Ok(EmpiricalFlow { grid, nodes })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn node_cloud(&self, m: usize) -> &Array2<f64> {
        &self.nodes[m]
    }

    fn cloud_at(&self, t: f64) -> &Array2<f64> {
        &self.nodes[self.grid.nearest_node(t)]
    }
}

impl LawFlow for EmpiricalFlow {
    fn dim(&self) -> usize {
        self.nodes[0].ncols()
    }

    fn density_batch(&self, _t: f64, _xs: &ArrayView2<f64>) -> Result<Array1<f64>> {
        Err(Error::Capability(
            "empirical flow has no pointwise density; mollify it first".into(),
        ))
    }

    fn grad_batch(&self, _t: f64, _xs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Err(Error::Capability("empirical flow has no density gradient".into()))
    }

    fn sample(&self, t: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        use rand::Rng;
        let cloud = self.cloud_at(t);
        let mut out = Array2::zeros((n, cloud.ncols()));
        for i in 0..n {
            let j = rng.random_range(0..cloud.nrows());
            out.row_mut(i).assign(&cloud.row(j));
        }
        Ok(out)
    }

    fn mean(&self, t: f64, _n: usize, _rng: &mut ChaCha8Rng) -> Result<Array1<f64>> {
        Ok(self.cloud_at(t).mean_axis(ndarray::Axis(0)).unwrap())
    }
}
