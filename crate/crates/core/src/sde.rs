//! Explicit Euler simulation of interacting particle batches whose
//! coefficients read the current law through [`LawFlow`].
//!
//! The time loop is batch-major: at every step the drift and diffusion
//! closures see the whole particle block at once (one matrix pass through the
//! density model instead of K scalar passes). Work is partitioned into fixed
//! row chunks regardless of threading, and every random increment is keyed by
//! (seed, epoch, particle, node), so parallel execution is bit-identical to
//! sequential.
//!
//! Closures receive *elapsed* time (the model-time convention of
//! [`TimeGrid`]); physical offsets only matter to reference solutions.

use std::io::Write;
use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::density::LawFlow;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::{stream_rng, tag, NoiseSource};

/// Per-node auxiliary data prepared once per (epoch, node) and shared
/// read-only by every particle: an interaction sample cloud, a mean-field
/// estimate, or nothing.
#[derive(Clone, Debug, Default)]
pub struct NodeCtx {
    pub cloud: Option<Array2<f64>>,
    pub mean: Option<Array1<f64>>,
}

/// Batched drift: (elapsed t, global index of the first row, states (n, d),
/// law, node context) -> (n, d). The row offset lets interaction kernels give
/// each particle its own slice of per-node context data.
pub type DriftFn = Box<
    dyn Fn(f64, usize, &ArrayView2<f64>, &dyn LawFlow, &NodeCtx) -> Result<Array2<f64>>
        + Send
        + Sync,
>;

/// Batched diffusion coefficient; see [`SigmaBatch`] for the shapes.
pub type SigmaFn =
    Box<dyn Fn(f64, &ArrayView2<f64>, &dyn LawFlow, &NodeCtx) -> Result<SigmaBatch> + Send + Sync>;

/// Node-context preparation: (law, elapsed t, keyed rng) -> context.
pub type NodeCtxFn =
    Box<dyn Fn(&dyn LawFlow, f64, &mut ChaCha8Rng) -> Result<NodeCtx> + Send + Sync>;

/// Initial-condition sampler: draws n i.i.d. points with the supplied stream.
pub type InitFn = Box<dyn Fn(usize, &mut ChaCha8Rng) -> Result<Array2<f64>> + Send + Sync>;

/// Diffusion coefficients for a particle block.
pub enum SigmaBatch {
    /// One scalar per particle, multiplying the identity.
    Scalar(Array1<f64>),
    /// One scale per particle and coordinate.
    Diag(Array2<f64>),
    /// A full matrix per particle: increment_i = M_i . dz_i.
    Matrix(Array3<f64>),
}

impl SigmaBatch {
    fn check(&self, n: usize, d: usize) -> Result<()> {
        let ok = match self {
            SigmaBatch::Scalar(a) => a.len() == n,
            SigmaBatch::Diag(a) => a.shape() == [n, d],
            SigmaBatch::Matrix(a) => a.shape() == [n, d, d],
        };
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: n * d,
                got: match self {
                    SigmaBatch::Scalar(a) => a.len(),
                    SigmaBatch::Diag(a) => a.len(),
                    SigmaBatch::Matrix(a) => a.len(),
                },
            })
        }
    }
}

/// One explicit Euler step: `x + b dt + sigma . dz`.
pub fn euler_step(
    x: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    sigma: &SigmaBatch,
    dz: &ArrayView2<f64>,
    dt: f64,
) -> Result<Array2<f64>> {
    let (n, d) = (x.nrows(), x.ncols());
    if b.shape() != [n, d] || dz.shape() != [n, d] {
        return Err(Error::DimensionMismatch {
            expected: n * d,
            got: if b.shape() != [n, d] { b.len() } else { dz.len() },
        });
    }
    sigma.check(n, d)?;
    let mut out = x.to_owned();
    out.scaled_add(dt, b);
    match sigma {
        SigmaBatch::Scalar(s) => {
            for i in 0..n {
                for j in 0..d {
                    out[[i, j]] += s[i] * dz[[i, j]];
                }
            }
        }
        SigmaBatch::Diag(s) => {
            for i in 0..n {
                for j in 0..d {
                    out[[i, j]] += s[[i, j]] * dz[[i, j]];
                }
            }
        }
        SigmaBatch::Matrix(m) => {
            for i in 0..n {
                for j in 0..d {
                    let mut acc = 0.0;
                    for l in 0..d {
                        acc += m[[i, j, l]] * dz[[i, l]];
                    }
                    out[[i, j]] += acc;
                }
            }
        }
    }
    Ok(out)
}

/// Per-(epoch, particle, node) noise increments. Implemented by
/// [`NoiseSource`]; tests inject constant generators to pin the scheme.
pub trait NoiseGen: Sync {
    fn dim(&self) -> usize;
    /// Increment rows for `particles` on the step landing at `node`.
    fn increments(&self, dt: f64, epoch: u64, node: usize, particles: Range<usize>) -> Array2<f64>;
}

impl NoiseGen for NoiseSource {
    fn dim(&self) -> usize {
        NoiseSource::dim(self)
    }

    fn increments(&self, dt: f64, epoch: u64, node: usize, particles: Range<usize>) -> Array2<f64> {
        let mut out = Array2::zeros((particles.len(), NoiseSource::dim(self)));
        for (row, p) in particles.enumerate() {
            self.increment_into(
                dt,
                epoch,
                p as u64,
                node as u64,
                out.row_mut(row).as_slice_mut().unwrap(),
            );
        }
        out
    }
}

/// The coefficient bundle a problem hands to the simulator.
pub struct Dynamics {
    pub drift: DriftFn,
    pub sigma: SigmaFn,
    pub prepare_node: Option<NodeCtxFn>,
}

/// A simulated particle batch: states indexed (node, particle, coordinate).
pub struct TrajectoryEnsemble {
    pub grid: TimeGrid,
    pub states: Array3<f64>,
}

impl TrajectoryEnsemble {
    pub fn n_particles(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[2]
    }

    pub fn node_view(&self, m: usize) -> ArrayView2<'_, f64> {
        self.states.index_axis(Axis(0), m)
    }

    /// Long-format dump: one row per (node, particle).
    pub fn write_csv(&self, w: &mut dyn Write, epoch: u64) -> Result<()> {
        let d = self.dim();
        let mut header = String::from("epoch,m,t,i");
        for j in 0..d {
            header.push_str(&format!(",x{j}"));
        }
        writeln!(w, "{header}")?;
        for m in 0..self.grid.n_nodes() {
            let t = self.grid.node(m);
            for i in 0..self.n_particles() {
                let mut line = format!("{epoch},{m},{t},{i}");
                for j in 0..d {
                    line.push_str(&format!(",{}", self.states[[m, i, j]]));
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Chunk width used for both sequential and parallel execution, so the two
/// paths perform identical sub-batch computations.
const SIM_CHUNK: usize = 512;

pub(crate) fn chunk_ranges(k: usize) -> Vec<Range<usize>> {
    (0..k.div_ceil(SIM_CHUNK))
        .map(|c| c * SIM_CHUNK..((c + 1) * SIM_CHUNK).min(k))
        .collect()
}

pub struct SimParams<'a> {
    pub law: &'a dyn LawFlow,
    pub init: &'a InitFn,
    pub noise: &'a dyn NoiseGen,
    pub grid: &'a TimeGrid,
    pub n_particles: usize,
    pub seed: u64,
    pub epoch: u64,
    pub parallel: bool,
}

/// Simulate a batch of particles through the frozen law.
///
/// Fails fast on non-finite states, naming the first offending particle and
/// the node where it blew up.
pub fn simulate_batch(dynamics: &Dynamics, p: &SimParams) -> Result<TrajectoryEnsemble> {
    let k = p.n_particles;
    if k == 0 {
        return Err(Error::EmptyBatch);
    }
    let d = p.noise.dim();
    let steps = p.grid.steps();
    let dt = p.grid.dt();

    let mut states = Array3::zeros((steps + 1, k, d));
    {
        let mut rng = stream_rng(p.seed, &[tag::INIT, p.epoch]);
        let x0 = (p.init)(k, &mut rng)?;
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

    // Node contexts depend only on the frozen law, not on particle states, so
    // they are prepared up front on their own keyed streams.
    let mut ctxs = Vec::with_capacity(steps + 1);
    for m in 0..=steps {
        let ctx = match &dynamics.prepare_node {
            Some(f) => {
                let mut rng = stream_rng(p.seed, &[tag::NODE_CTX, p.epoch, m as u64]);
                f(p.law, p.grid.elapsed(m), &mut rng)?
            }
            None => NodeCtx::default(),
        };
        ctxs.push(ctx);
    }

    let ranges = chunk_ranges(k);
    for m in 1..=steps {
        let te = p.grid.elapsed(m - 1);
        let ctx = &ctxs[m - 1];
        let (head, tail) = states.view_mut().split_at(Axis(0), m);
        let prev = head.index_axis(Axis(0), m - 1);
        let mut cur = tail.index_axis_move(Axis(0), 0);

        let step_chunk = |r: &Range<usize>| -> Result<(Array2<f64>, Option<usize>)> {
            let xv = prev.slice(s![r.clone(), ..]);
            let b = (dynamics.drift)(te, r.start, &xv, p.law, ctx)?;
            if b.shape() != [r.len(), d] {
                return Err(Error::DimensionMismatch {
                    expected: r.len() * d,
                    got: b.len(),
                });
            }
            let sg = (dynamics.sigma)(te, &xv, p.law, ctx)?;
            let dz = p.noise.increments(dt, p.epoch, m, r.clone());
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

        let mut first_bad: Option<usize> = None;
        for (r, (out, bad)) in ranges.iter().zip(results) {
            cur.slice_mut(s![r.clone(), ..]).assign(&out);
            if let Some(bp) = bad {
                first_bad = Some(first_bad.map_or(bp, |c| c.min(bp)));
            }
        }
        if let Some(particle) = first_bad {
            return Err(Error::BlowUp { particle, node: m });
        }
    }

    Ok(TrajectoryEnsemble {
        grid: p.grid.clone(),
        states,
    })
}
