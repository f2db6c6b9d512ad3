//! Classical particle reference solvers: the plain interacting particle
//! system (every particle sees the whole current cloud) and the explicit
//! batch-by-batch measure mixture. Both serve as oracles for the trained
//! pathways and as reference-solution generators.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::density::{FourierDensity, LawFlow};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::{truncate_particles, Kde, MollifierSpec};
use crate::noise::{stream_rng, tag, NoiseSource};
use crate::problems::ProblemSpec;
use crate::sde::{
    chunk_ranges, euler_step, simulate_batch, NodeCtx, NoiseGen as _, SimParams,
    TrajectoryEnsemble,
};

/// The law one particle cloud presents to dynamics closures: density and
/// gradient from the mollified cloud, mean and samples from the cloud
/// itself. Time inputs are ignored — the cloud *is* the current law.
pub struct CloudLaw<'a> {
    cloud: ArrayView2<'a, f64>,
    kde: Kde<'a>,
}

impl<'a> CloudLaw<'a> {
    pub fn new(cloud: ArrayView2<'a, f64>, moll: MollifierSpec) -> Result<Self> {
        Ok(CloudLaw {
            cloud,
            kde: Kde::new(cloud, moll)?,
        })
    }
}

impl LawFlow for CloudLaw<'_> {
    fn dim(&self) -> usize {
        self.cloud.ncols()
    }

    fn density_batch(&self, _t: f64, xs: &ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.kde.eval_batch(xs))
    }

    fn grad_batch(&self, _t: f64, xs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.kde.grad_batch(xs))
    }

    fn sample(&self, _t: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((n, self.cloud.ncols()));
        for i in 0..n {
            let j = rng.random_range(0..self.cloud.nrows());
            out.row_mut(i).assign(&self.cloud.row(j));
        }
        Ok(out)
    }

    fn mean(&self, _t: f64, _n: usize, _rng: &mut ChaCha8Rng) -> Result<Array1<f64>> {
        Ok(self.cloud.mean_axis(Axis(0)).unwrap())
    }
}

pub struct PocParams {
    pub n_particles: usize,
    pub seed: u64,
    pub moll: MollifierSpec,
    pub parallel: bool,
}

/// The interacting particle system: one Euler pass where, at every step, each
/// particle's coefficients see the *current* cloud — exact mean and full
/// cloud in the node context, mollified cloud density behind the law handle.
/// The problem's own `prepare_node` is bypassed: it exists to sample context
/// from a frozen model, and here the empirical versions are exact.
pub fn baseline_poc(problem: &ProblemSpec, p: &PocParams) -> Result<TrajectoryEnsemble> {
    let k = p.n_particles;
    if k < 2 {
        return Err(Error::InvalidParameter(
            "the interacting system needs at least two particles".into(),
        ));
    }
    let d = problem.dim();
    if p.moll.dim != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: p.moll.dim,
        });
    }
    let noise = NoiseSource::new(problem.noise_kind, d, p.seed)?;
    let grid = &problem.grid;
    let dt = grid.dt();

    let mut states = Array3::zeros((grid.n_nodes(), k, d));
    {
        let mut rng = stream_rng(p.seed, &[tag::INIT, 0]);
        let x0 = (problem.init)(k, &mut rng)?;
        if x0.shape() != [k, d] {
            return Err(Error::DimensionMismatch {
                expected: k * d,
                got: x0.len(),
            });
        }
        if let Some((i, _)) = x0
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::BlowUp { particle: i, node: 0 });
        }
        states.index_axis_mut(Axis(0), 0).assign(&x0);
    }

    let ranges = chunk_ranges(k);
    for m in 1..=grid.steps() {
        let te = grid.elapsed(m - 1);
        let prev = states.index_axis(Axis(0), m - 1).to_owned();
        let law = CloudLaw::new(prev.view(), p.moll)?;
        let ctx = NodeCtx {
            cloud: Some(prev.clone()),
            mean: Some(prev.mean_axis(Axis(0)).unwrap()),
        };

        let step_chunk = |r: &std::ops::Range<usize>| -> Result<(Array2<f64>, Option<usize>)> {
            let xv = prev.slice(ndarray::s![r.clone(), ..]);
            let b = (problem.dynamics.drift)(te, r.start, &xv, &law, &ctx)?;
            if b.shape() != [r.len(), d] {
                return Err(Error::DimensionMismatch {
                    expected: r.len() * d,
                    got: b.len(),
                });
            }
            let sg = (problem.dynamics.sigma)(te, &xv, &law, &ctx)?;
            let dz = noise.increments(dt, 0, m, r.clone());
            let out = euler_step(&xv, &b.view(), &sg, &dz.view(), dt)?;
            let bad = out
                .rows()
                .into_iter()
                .position(|row| row.iter().any(|v| !v.is_finite()))
                .map(|i| r.start + i);
            Ok((out, bad))
        };

        let results: Result<Vec<(Array2<f64>, Option<usize>)>> = if p.parallel {
            ranges.par_iter().map(step_chunk).collect()
        } else {
            ranges.iter().map(step_chunk).collect()
        };
        let results = results?;

        let mut cur = states.index_axis_mut(Axis(0), m);
        let mut first_bad: Option<usize> = None;
        for (r, (out, bad)) in ranges.iter().zip(results) {
            cur.slice_mut(ndarray::s![r.clone(), ..]).assign(&out);
            if let Some(bp) = bad {
                first_bad = Some(first_bad.map_or(bp, |c| c.min(bp)));
            }
        }
        if let Some(particle) = first_bad {
            return Err(Error::BlowUp { particle, node: m });
        }
    }

    Ok(TrajectoryEnsemble {
        grid: grid.clone(),
        states,
    })
}

/// Per-node mollified density of an ensemble on a fixed query set: one row
/// per time node, one column per query point.
pub fn density_table(
    ens: &TrajectoryEnsemble,
    moll: MollifierSpec,
    queries: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = ens.grid.n_nodes();
    let mut out = Array2::zeros((n, queries.nrows()));
    for m in 0..n {
        let kde = Kde::new(ens.node_view(m), moll)?;
        out.row_mut(m).assign(&kde.eval_batch(queries));
    }
    Ok(out)
}

/// The running measure of the batch-by-batch scheme, kept explicitly:
/// after updates mu <- mu + rate*(batch_kde - mu), the measure is a weighted
/// mixture of every batch's empirical measure plus a residual weight on the
/// initial cloud. Weights always sum to one.
pub struct SpocMixture {
    grid: TimeGrid,
    moll: MollifierSpec,
    /// Initial support cloud, constant across nodes.
    initial: Array2<f64>,
    batches: Vec<TrajectoryEnsemble>,
    weights: Vec<f64>,
    residual: f64,
}

impl SpocMixture {
    pub fn new(grid: TimeGrid, moll: MollifierSpec, initial: Array2<f64>) -> Result<Self> {
        if initial.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if initial.ncols() != moll.dim {
            return Err(Error::DimensionMismatch {
                expected: moll.dim,
                got: initial.ncols(),
            });
        }
        Ok(SpocMixture {
            grid,
            moll,
            initial,
            batches: Vec::new(),
            weights: Vec::new(),
            residual: 1.0,
        })
    }

    /// Mixes one batch in at `rate` in (0, 1]: every existing weight shrinks
    /// by (1 - rate) and the new batch enters at `rate`.
    pub fn push_batch(&mut self, batch: TrajectoryEnsemble, rate: f64) -> Result<()> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "mixture rate must lie in (0, 1], got {rate}"
            )));
        }
        if batch.grid.n_nodes() != self.grid.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.n_nodes(),
                got: batch.grid.n_nodes(),
            });
        }
        if batch.dim() != self.moll.dim {
            return Err(Error::DimensionMismatch {
                expected: self.moll.dim,
                got: batch.dim(),
            });
        }
        for w in self.weights.iter_mut() {
            *w *= 1.0 - rate;
        }
        self.residual *= 1.0 - rate;
        self.weights.push(rate);
        self.batches.push(batch);
        Ok(())
    }

    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight still carried by the initial cloud.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn weight_sum(&self) -> f64 {
        self.residual + self.weights.iter().sum::<f64>()
    }

    pub fn batch(&self, l: usize) -> &TrajectoryEnsemble {
        &self.batches[l]
    }

    /// Support clouds and weights at one node, initial cloud included.
    fn components_at(&self, node: usize) -> Vec<(ArrayView2<'_, f64>, f64)> {
        let mut out = Vec::with_capacity(self.batches.len() + 1);
        if self.residual != 0.0 {
            out.push((self.initial.view(), self.residual));
        }
        for (b, &w) in self.batches.iter().zip(&self.weights) {
            out.push((b.node_view(node), w));
        }
        out
    }

    /// Basis coefficients of the mixture's mollified density at one node,
    /// assembled per component through the same truncate-then-project
    /// pipeline the trained pathway uses.
    pub fn projected_coeffs(
        &self,
        probe: &FourierDensity,
        domain: &Domain,
        node: usize,
        quad_per_axis: usize,
    ) -> Result<Array1<f64>> {
        let mut acc = Array1::zeros(probe.n_basis());
        for (cloud, w) in self.components_at(node) {
            let (trunc, _) = truncate_particles(&cloud, domain, self.moll.eps)?;
            let kde = Kde::new(trunc.view(), self.moll)?;
            let f = move |xs: &ArrayView2<f64>| kde.eval_batch(xs);
            let theta = probe.project(&f, quad_per_axis)?;
            acc.scaled_add(w, &theta);
        }
        Ok(acc)
    }
}

impl LawFlow for SpocMixture {
    fn dim(&self) -> usize {
        self.moll.dim
    }

    fn density_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Result<Array1<f64>> {
        let node = self.grid.nearest_node(t);
        let mut out = Array1::zeros(xs.nrows());
        for (cloud, w) in self.components_at(node) {
            let kde = Kde::new(cloud, self.moll)?;
            out.scaled_add(w, &kde.eval_batch(xs));
        }
        Ok(out)
    }

    fn grad_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let node = self.grid.nearest_node(t);
        let mut out = Array2::zeros((xs.nrows(), self.moll.dim));
        for (cloud, w) in self.components_at(node) {
            let kde = Kde::new(cloud, self.moll)?;
            out.scaled_add(w, &kde.grad_batch(xs));
        }
        Ok(out)
    }

    fn sample(&self, t: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let node = self.grid.nearest_node(t);
        let comps = self.components_at(node);
        let total = self.weight_sum();
        let mut out = Array2::zeros((n, self.moll.dim));
        for i in 0..n {
            let mut u: f64 = rng.random::<f64>() * total;
            let mut chosen = comps.len() - 1;
            for (c, (_, w)) in comps.iter().enumerate() {
                if u < *w {
                    chosen = c;
                    break;
                }
                u -= *w;
            }
            let cloud = comps[chosen].0;
            let j = rng.random_range(0..cloud.nrows());
            out.row_mut(i).assign(&cloud.row(j));
        }
        Ok(out)
    }

    fn mean(&self, t: f64, _n: usize, _rng: &mut ChaCha8Rng) -> Result<Array1<f64>> {
        let node = self.grid.nearest_node(t);
        let mut out = Array1::zeros(self.moll.dim);
        let total = self.weight_sum();
        for (cloud, w) in self.components_at(node) {
            out.scaled_add(w / total, &cloud.mean_axis(Axis(0)).unwrap());
        }
        Ok(out)
    }
}

pub struct SpocParams {
    pub n_particles: usize,
    /// Direct mixing weights, one per batch, each in (0, 1].
    pub rates: Vec<f64>,
    pub moll: MollifierSpec,
    pub seed: u64,
    pub parallel: bool,
}

/// Batch-by-batch measure scheme: simulate each batch through the current
/// mixture, then mix its empirical measure in at the batch's rate. The
/// initial measure is the epoch-0 draw of the problem's initial condition,
/// matching the trained pathway's starting point.
pub fn baseline_spoc(problem: &ProblemSpec, p: &SpocParams) -> Result<SpocMixture> {
    if p.rates.is_empty() {
        return Err(Error::InvalidParameter("need at least one batch".into()));
    }
    let noise = NoiseSource::new(problem.noise_kind, problem.dim(), p.seed)?;
    let mut rng = stream_rng(p.seed, &[tag::INIT, 0]);
    let x0 = (problem.init)(p.n_particles, &mut rng)?;
    let mut mix = SpocMixture::new(problem.grid.clone(), p.moll, x0)?;
    for (l, &rate) in p.rates.iter().enumerate() {
        let batch = simulate_batch(
            &problem.dynamics,
            &SimParams {
                law: &mix,
                init: &problem.init,
                noise: &noise,
                grid: &problem.grid,
                n_particles: p.n_particles,
                seed: p.seed,
                epoch: (l + 1) as u64,
                parallel: p.parallel,
            },
        )?;
        mix.push_batch(batch, rate)?;
    }
    Ok(mix)
}
