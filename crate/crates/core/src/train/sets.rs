//! Training-point construction: where the losses are evaluated each epoch.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::SetPolicy;
use crate::density::{rejection_sample_fn, FrozenDensity};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::{Kde, MollifierSpec};
use crate::noise::{stream_rng, tag};
use crate::sde::TrajectoryEnsemble;

/// Everything a set policy may draw on. Policies that don't need a field
/// ignore it; policies that do report a clear error when it is missing.
pub struct SetContext<'a> {
    pub domain: &'a Domain,
    pub grid: &'a TimeGrid,
    /// Previous epoch's simulated batch (adaptive-union policy).
    pub prev: Option<&'a TrajectoryEnsemble>,
    /// Current epoch's simulated batch (particle-paths policy and
    /// mollified-importance sampling).
    pub current: Option<&'a TrajectoryEnsemble>,
    /// Frozen view of the current model (model-importance sampling).
    pub frozen: Option<&'a FrozenDensity<'a>>,
    /// Mollifier for mollified-importance accept-reject.
    pub moll: Option<MollifierSpec>,
}

/// Builds one training set per time node according to `policy`. Draws are
/// seeded by `(seed, epoch)` so a rerun reproduces them bit for bit.
pub fn build_training_sets(
    policy: &SetPolicy,
    ctx: &SetContext<'_>,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Array2<f64>>> {
    let nodes = ctx.grid.n_nodes();
    let d = ctx.domain.dim();
    match *policy {
        SetPolicy::Uniform { n1 } => {
            if n1 == 0 {
                return Err(Error::InvalidParameter(
                    "uniform policy needs at least one point".into(),
                ));
            }
            let mut rng = stream_rng(seed, &[tag::TRAIN_SET, epoch]);
            let shared = ctx.domain.sample_uniform(n1, &mut rng);
            Ok(vec![shared; nodes])
        }
        SetPolicy::AdaptiveUnion {
            n1,
            n2,
            sigma_noise,
        } => {
            if !(sigma_noise >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "jitter scale must be nonnegative, got {sigma_noise}"
                )));
            }
            let Some(prev) = ctx.prev else {
                // First epoch: no path data yet, uniform part only.
                if n1 == 0 {
                    return Err(Error::InvalidParameter(
                        "adaptive policy with no previous batch needs uniform points".into(),
                    ));
                }
                let mut rng = stream_rng(seed, &[tag::TRAIN_SET, epoch, 0]);
                let shared = ctx.domain.sample_uniform(n1, &mut rng);
                return Ok(vec![shared; nodes]);
            };
            let k = prev.n_particles();
            if n2 > k {
                return Err(Error::InvalidParameter(format!(
                    "cannot select {n2} particles without replacement from a batch of {k}"
                )));
            }
            if n1 + n2 == 0 {
                return Err(Error::InvalidParameter(
                    "adaptive policy needs n1 + n2 >= 1".into(),
                ));
            }
            if prev.grid.n_nodes() != nodes {
                return Err(Error::InvalidParameter(format!(
                    "previous batch has {} nodes, grid has {nodes}",
                    prev.grid.n_nodes()
                )));
            }
            let shared = if n1 > 0 {
                let mut rng = stream_rng(seed, &[tag::TRAIN_SET, epoch, 0]);
                Some(ctx.domain.sample_uniform(n1, &mut rng))
            } else {
                None
            };
            // One index selection per epoch, so the chosen rows follow whole
            // particle paths across nodes (partial Fisher-Yates, no
            // replacement).
            let mut sel_rng = stream_rng(seed, &[tag::TRAIN_SET, epoch, 1]);
            let mut idx: Vec<usize> = (0..k).collect();
            for i in 0..n2 {
                let j = i + sel_rng.random_range(0..k - i);
                idx.swap(i, j);
            }
            let selected = &idx[..n2];
            let mut out = Vec::with_capacity(nodes);
            for m in 0..nodes {
                let mut set = Array2::zeros((n1 + n2, d));
                if let Some(shared) = &shared {
                    set.slice_mut(ndarray::s![..n1, ..]).assign(shared);
                }
                let cloud = prev.node_view(m);
                let mut jitter_rng = stream_rng(seed, &[tag::TRAIN_SET, epoch, 2 + m as u64]);
                for (row, &i) in selected.iter().enumerate() {
                    for c in 0..d {
                        let delta: f64 = jitter_rng.sample(StandardNormal);
                        set[[n1 + row, c]] = cloud[[i, c]] + sigma_noise * delta;
                    }
                }
                out.push(set);
            }
            Ok(out)
        }
        SetPolicy::ModelImportance { n, from_mollified } => {
            if n == 0 {
                return Err(Error::InvalidParameter(
                    "importance policy needs at least one point".into(),
                ));
            }
            let mut out = Vec::with_capacity(nodes);
            if from_mollified {
                let current = ctx.current.ok_or_else(|| {
                    Error::InvalidParameter(
                        "mollified-importance sampling needs the current batch".into(),
                    )
                })?;
                let moll = ctx.moll.ok_or_else(|| {
                    Error::InvalidParameter(
                        "mollified-importance sampling needs a mollifier".into(),
                    )
                })?;
                // The batch density never exceeds the kernel's peak value.
                let envelope = moll.eval_diff(&vec![0.0; d]);
                for m in 0..nodes {
                    let kde = Kde::new(current.node_view(m), moll)?;
                    let target = move |xs: &ndarray::ArrayView2<f64>| kde.eval_batch(xs);
                    let mut rng = stream_rng(seed, &[tag::TRAIN_SET, epoch, m as u64]);
                    out.push(rejection_sample_fn(
                        &target,
                        ctx.domain,
                        envelope,
                        n,
                        &mut rng,
                    )?);
                }
            } else {
                let frozen = ctx.frozen.ok_or_else(|| {
                    Error::InvalidParameter(
                        "model-importance sampling needs the frozen model".into(),
                    )
                })?;
                for m in 0..nodes {
                    let mut rng = stream_rng(seed, &[tag::TRAIN_SET, epoch, m as u64]);
                    out.push(frozen.sample(ctx.grid.elapsed(m), n, &mut rng)?);
                }
            }
            Ok(out)
        }
        SetPolicy::ParticlePaths => {
            let current = ctx.current.ok_or_else(|| {
                Error::InvalidParameter("particle-paths policy needs the current batch".into())
            })?;
            Ok((0..nodes).map(|m| current.node_view(m).to_owned()).collect())
        }
    }
}

/// Mollified batch density evaluated on each node's training set.
pub fn kde_tables(
    batch: &TrajectoryEnsemble,
    moll: MollifierSpec,
    sets: &[Array2<f64>],
) -> Result<Vec<Array1<f64>>> {
    if sets.len() != batch.grid.n_nodes() {
        return Err(Error::InvalidParameter(format!(
            "{} training sets for {} nodes",
            sets.len(),
            batch.grid.n_nodes()
        )));
    }
    let mut out = Vec::with_capacity(sets.len());
    for (m, set) in sets.iter().enumerate() {
        let kde = Kde::new(batch.node_view(m), moll)?;
        out.push(kde.eval_batch(&set.view()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{CouplingFlowDensity, QuadSpec};
    use crate::measure::MollifierKind;
    use ndarray::Array3;

    fn ctx_with<'a>(
        domain: &'a Domain,
        grid: &'a TimeGrid,
        prev: Option<&'a TrajectoryEnsemble>,
        current: Option<&'a TrajectoryEnsemble>,
    ) -> SetContext<'a> {
        SetContext {
            domain,
            grid,
            prev,
            current,
            frozen: None,
            moll: None,
        }
    }

    fn toy_ensemble(grid: &TimeGrid, k: usize, d: usize) -> TrajectoryEnsemble {
        TrajectoryEnsemble {
            grid: grid.clone(),
            states: Array3::from_shape_fn((grid.n_nodes(), k, d), |(m, i, c)| {
                0.31 * i as f64 - 0.07 * m as f64 + 0.001 * c as f64
            }),
        }
    }

    #[test]
    fn uniform_sets_are_shared_inside_the_window_and_reproducible() {
        let domain = Domain::cube(2, 1.5).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let ctx = ctx_with(&domain, &grid, None, None);
        let sets = build_training_sets(&SetPolicy::Uniform { n1: 7 }, &ctx, 11, 4).unwrap();
        assert_eq!(sets.len(), 4);
        for s in &sets {
            assert_eq!(s.dim(), (7, 2));
            assert_eq!(s, &sets[0], "shared across nodes");
            for row in s.rows() {
                assert!(domain.contains(row.as_slice().unwrap()));
            }
        }
        let again = build_training_sets(&SetPolicy::Uniform { n1: 7 }, &ctx, 11, 4).unwrap();
        assert_eq!(sets, again, "same seed and epoch reproduce bits");
        let other = build_training_sets(&SetPolicy::Uniform { n1: 7 }, &ctx, 11, 5).unwrap();
        assert_ne!(sets[0], other[0], "fresh draw per epoch");
    }

    #[test]
    fn adaptive_zero_noise_zero_uniform_returns_exactly_the_selected_particles() {
        let domain = Domain::cube(1, 4.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let prev = toy_ensemble(&grid, 5, 1);
        let ctx = ctx_with(&domain, &grid, Some(&prev), None);
        let policy = SetPolicy::AdaptiveUnion {
            n1: 0,
            n2: 5,
            sigma_noise: 0.0,
        };
        let sets = build_training_sets(&policy, &ctx, 3, 2).unwrap();
        for (m, s) in sets.iter().enumerate() {
            let mut got: Vec<f64> = s.column(0).to_vec();
            let mut want: Vec<f64> = prev.node_view(m).column(0).to_vec();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            assert_eq!(got, want, "node {m}: selected rows are the particles");
        }
    }

    #[test]
    fn adaptive_counts_fallback_and_overdraw_error() {
        let domain = Domain::cube(1, 4.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 1).unwrap();
        let prev = toy_ensemble(&grid, 6, 1);
        let policy = SetPolicy::AdaptiveUnion {
            n1: 3,
            n2: 2,
            sigma_noise: 0.1,
        };
        let ctx = ctx_with(&domain, &grid, Some(&prev), None);
        let sets = build_training_sets(&policy, &ctx, 3, 2).unwrap();
        assert!(sets.iter().all(|s| s.nrows() == 5));
        // The uniform part is shared across nodes, the jittered part is not.
        assert_eq!(
            sets[0].slice(ndarray::s![..3, ..]),
            sets[1].slice(ndarray::s![..3, ..])
        );
        assert_ne!(
            sets[0].slice(ndarray::s![3.., ..]),
            sets[1].slice(ndarray::s![3.., ..])
        );

        // No previous batch: uniform-only fallback.
        let ctx0 = ctx_with(&domain, &grid, None, None);
        let fallback = build_training_sets(&policy, &ctx0, 3, 1).unwrap();
        assert!(fallback.iter().all(|s| s.nrows() == 3));

        // Selecting more particles than the batch holds is refused.
        let over = SetPolicy::AdaptiveUnion {
            n1: 0,
            n2: 7,
            sigma_noise: 0.0,
        };
        assert!(build_training_sets(&over, &ctx, 3, 2).is_err());
    }

    #[test]
    fn particle_paths_copies_the_batch() {
        let domain = Domain::cube(1, 4.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let batch = toy_ensemble(&grid, 4, 1);
        let ctx = ctx_with(&domain, &grid, None, Some(&batch));
        let sets = build_training_sets(&SetPolicy::ParticlePaths, &ctx, 1, 1).unwrap();
        for m in 0..3 {
            assert_eq!(sets[m], batch.node_view(m).to_owned());
        }
        let missing = ctx_with(&domain, &grid, None, None);
        assert!(build_training_sets(&SetPolicy::ParticlePaths, &missing, 1, 1).is_err());
    }

    #[test]
    fn model_importance_draws_from_the_frozen_flow() {
        let domain = Domain::cube(1, 3.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 1).unwrap();
        let flow = CouplingFlowDensity::new(domain.clone(), 2, &[6], 5).unwrap();
        let frozen = FrozenDensity::new(&flow, grid.clone(), QuadSpec::default());
        let ctx = SetContext {
            domain: &domain,
            grid: &grid,
            prev: None,
            current: None,
            frozen: Some(&frozen),
            moll: None,
        };
        let policy = SetPolicy::ModelImportance {
            n: 40,
            from_mollified: false,
        };
        let sets = build_training_sets(&policy, &ctx, 9, 0).unwrap();
        assert_eq!(sets.len(), 2);
        assert!(sets.iter().all(|s| s.dim() == (40, 1)));
        assert_ne!(sets[0], sets[1], "per-node draws");
        let again = build_training_sets(&policy, &ctx, 9, 0).unwrap();
        assert_eq!(sets, again);
    }

    #[test]
    fn mollified_importance_concentrates_near_the_particles() {
        let domain = Domain::cube(1, 3.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 1).unwrap();
        // Batch pinned at +/- 0.5 with a narrow kernel: samples stay close.
        let mut batch = toy_ensemble(&grid, 2, 1);
        batch.states.fill(0.0);
        for m in 0..2 {
            batch.states[[m, 0, 0]] = -0.5;
            batch.states[[m, 1, 0]] = 0.5;
        }
        let moll = MollifierSpec::new(MollifierKind::Gaussian, 0.05, 1).unwrap();
        let ctx = SetContext {
            domain: &domain,
            grid: &grid,
            prev: None,
            current: Some(&batch),
            frozen: None,
            moll: Some(moll),
        };
        let policy = SetPolicy::ModelImportance {
            n: 400,
            from_mollified: true,
        };
        let sets = build_training_sets(&policy, &ctx, 4, 3).unwrap();
        for s in &sets {
            assert_eq!(s.nrows(), 400);
            let near = s
                .column(0)
                .iter()
                .filter(|x| (x.abs() - 0.5).abs() < 0.25)
                .count();
            assert!(near > 380, "only {near}/400 samples near the particles");
            let mean = s.column(0).sum() / 400.0;
            assert!(mean.abs() < 0.12, "sample mean {mean} should be near 0");
        }
    }
}
