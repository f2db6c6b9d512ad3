//! The per-epoch update loop: freeze the model, push a particle batch
//! through it, mollify the batch, and move the model one step toward it.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};

use super::adam::{AdamParams, AdamState};
use super::loss::{loss_kl, loss_path, loss_sq, KlWeights, LossOut};
use super::sets::{build_training_sets, kde_tables, SetContext};
use super::{LossKind, RateRule, SetPolicy};
use crate::density::{fourier_update, DensityModel, FrozenDensity, QuadSpec};
use crate::error::{Error, Result};
use crate::measure::{truncate_particles, Kde, MollifierSpec};
use crate::noise::{stream_rng, tag, NoiseSource};
use crate::problems::ProblemSpec;
use crate::sde::{simulate_batch, SimParams, TrajectoryEnsemble};

/// Outer-iteration plan: after a first pass with the base set policy, later
/// passes re-sample training points by importance from the partly trained
/// model.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaSchedule {
    /// Total outer iterations (1 = no adaptive restart).
    pub iterations: u32,
    /// Epochs per outer iteration; the rate schedule restarts with each.
    pub epochs_per_iteration: usize,
    /// Set policy for iterations >= 1.
    pub importance: SetPolicy,
    /// Reset optimizer moments at iteration boundaries.
    pub reset_adam: bool,
}

/// Everything one training run needs besides the problem and the model.
#[derive(Clone, Copy, Debug)]
pub struct TrainRun {
    pub seed: u64,
    pub loss: LossKind,
    pub rate: RateRule,
    pub set_policy: SetPolicy,
    pub moll: MollifierSpec,
    pub quad: QuadSpec,
    /// Batch size K.
    pub n_particles: usize,
    /// Divide the squared loss by the node count (pure rescale).
    pub divide_by_nodes: bool,
    /// Parallel particle simulation (bit-identical to sequential).
    pub parallel: bool,
    pub adam: AdamParams,
    pub ada: Option<AdaSchedule>,
    /// Gauss nodes per axis for closed-form basis projection
    /// (None: twice the per-axis mode count, floor 32).
    pub projection_quad: Option<usize>,
}

impl TrainRun {
    /// Sensible defaults around a given seed/loss/policy.
    pub fn new(seed: u64, loss: LossKind, set_policy: SetPolicy, n_particles: usize) -> Self {
        TrainRun {
            seed,
            loss,
            rate: RateRule::Geometric(super::Schedule::default()),
            set_policy,
            moll: MollifierSpec {
                kind: crate::measure::MollifierKind::Gaussian,
                eps: 0.1,
                dim: 1,
            },
            quad: QuadSpec::default(),
            n_particles,
            divide_by_nodes: false,
            parallel: false,
            adam: AdamParams::default(),
            ada: None,
            projection_quad: None,
        }
    }
}

/// What one epoch reports to logs and progress hooks.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct EpochReport {
    /// Global epoch number, starting at 1 (0 names the initial batch).
    pub epoch: u64,
    pub iteration: u32,
    pub lr: f64,
    pub loss: f64,
    pub clamped_logs: u64,
    pub acceptance_rate: f64,
    /// Particles moved to the origin by the window truncation
    /// (closed-form pathway only).
    pub truncated: usize,
    pub seconds: f64,
}

/// Owns the model, the optimizer, and the previous batch; advances one epoch
/// per [`Trainer::epoch`] call.
pub struct Trainer {
    problem: ProblemSpec,
    model: Box<dyn DensityModel>,
    run: TrainRun,
    adam: AdamState,
    noise: NoiseSource,
    prev: Option<TrajectoryEnsemble>,
    next_epoch: u64,
    is_fourier: bool,
}

fn policy_needs_direct_sampling(policy: &SetPolicy) -> bool {
    matches!(
        policy,
        SetPolicy::ModelImportance {
            from_mollified: false,
            ..
        }
    )
}

impl Trainer {
    pub fn new(
        problem: ProblemSpec,
        mut model: Box<dyn DensityModel>,
        run: TrainRun,
    ) -> Result<Self> {
        run.rate.validate()?;
        if run.n_particles == 0 {
            return Err(Error::EmptyBatch);
        }
        if model.dim() != problem.dim() {
            return Err(Error::DimensionMismatch {
                expected: problem.dim(),
                got: model.dim(),
            });
        }
        if run.moll.dim != problem.dim() {
            return Err(Error::DimensionMismatch {
                expected: problem.dim(),
                got: run.moll.dim,
            });
        }
        let is_fourier = model.fourier_view().is_some();
        if is_fourier {
            if run.loss != LossKind::Sq {
                return Err(Error::Capability(
                    "the closed-form basis model trains only under the squared loss".into(),
                ));
            }
            if let RateRule::Geometric(s) = run.rate {
                if s.alpha0 > 0.5 {
                    return Err(Error::InvalidParameter(format!(
                        "closed-form mixing needs rates in (0, 1/2], got alpha0 = {}",
                        s.alpha0
                    )));
                }
            }
        }
        if run.loss == LossKind::Path && !model.caps().exact_density {
            return Err(Error::Capability(format!(
                "path likelihood needs an exact density; {} reports none",
                model.kind_name()
            )));
        }
        let check_policy = |policy: &SetPolicy| -> Result<()> {
            match *policy {
                SetPolicy::AdaptiveUnion { n1, n2, .. } => {
                    if n2 > run.n_particles {
                        return Err(Error::InvalidParameter(format!(
                            "adaptive policy selects {n2} particles from a batch of {}",
                            run.n_particles
                        )));
                    }
                    if n1 + n2 == 0 {
                        return Err(Error::InvalidParameter(
                            "adaptive policy needs n1 + n2 >= 1".into(),
                        ));
                    }
                }
                SetPolicy::Uniform { n1 } if n1 == 0 => {
                    return Err(Error::InvalidParameter(
                        "uniform policy needs at least one point".into(),
                    ));
                }
                _ => {}
            }
            if run.loss == LossKind::Kl
                && policy_needs_direct_sampling(policy)
                && !model.caps().direct_sampling
            {
                return Err(Error::Capability(format!(
                    "importance-sampled training points need direct sampling; {} cannot",
                    model.kind_name()
                )));
            }
            Ok(())
        };
        check_policy(&run.set_policy)?;
        if let Some(ada) = &run.ada {
            if ada.iterations == 0 || ada.epochs_per_iteration == 0 {
                return Err(Error::InvalidParameter(
                    "adaptive outer loop needs iterations >= 1 and epochs >= 1".into(),
                ));
            }
            if ada.iterations > 1 {
                check_policy(&ada.importance)?;
            }
        }

        let noise = NoiseSource::new(problem.noise_kind, problem.dim(), run.seed)?;
        let adam = AdamState::new(model.param_len(), run.adam);

        // Closed-form pathway: start from the projected mollified initial
        // batch (epoch word 0, constant paths), identical at every node.
        if let Some(fv) = model.fourier_view() {
            let mut rng = stream_rng(run.seed, &[tag::INIT, 0]);
            let x0 = (problem.init)(run.n_particles, &mut rng)?;
            let (trunc, _) = truncate_particles(&x0.view(), &problem.domain, run.moll.eps)?;
            let kde = Kde::new(trunc.view(), run.moll)?;
            let f = move |xs: &ArrayView2<f64>| kde.eval_batch(xs);
            let per_axis = run
                .projection_quad
                .unwrap_or_else(|| (2 * fv.modes_per_axis()).max(32));
            let theta = fv.project(&f, per_axis)?;
            for m in 0..problem.grid.n_nodes() {
                fv.set_coeffs_at(m, &theta.view())?;
            }
        }

        Ok(Trainer {
            problem,
            model,
            run,
            adam,
            noise,
            prev: None,
            next_epoch: 1,
            is_fourier,
        })
    }

    pub fn model(&self) -> &dyn DensityModel {
        self.model.as_ref()
    }

    pub fn into_model(self) -> Box<dyn DensityModel> {
        self.model
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    /// The particle batch simulated in the most recent epoch.
    pub fn last_batch(&self) -> Option<&TrajectoryEnsemble> {
        self.prev.as_ref()
    }

    /// Next epoch's global number (1-based).
    pub fn next_epoch(&self) -> u64 {
        self.next_epoch
    }

    /// Outer iteration and iteration-local epoch index for a global
    /// (1-based) epoch number.
    fn split_epoch(&self, e: u64) -> (u32, usize) {
        match &self.run.ada {
            None => (0, (e - 1) as usize),
            Some(a) => {
                let raw = (e - 1) as usize / a.epochs_per_iteration;
                let iter = (raw as u32).min(a.iterations - 1);
                let local = if (raw as u32) < a.iterations {
                    (e - 1) as usize % a.epochs_per_iteration
                } else {
                    // Epochs past the plan extend the last iteration.
                    (e - 1) as usize - (a.iterations as usize - 1) * a.epochs_per_iteration
                };
                (iter, local)
            }
        }
    }

    /// Runs one epoch at the scheduled rate.
    pub fn epoch(&mut self) -> Result<EpochReport> {
        let e = self.next_epoch;
        let (iteration, local) = self.split_epoch(e);
        if let Some(a) = &self.run.ada {
            if a.reset_adam && iteration > 0 && local == 0 {
                self.adam = AdamState::new(self.model.param_len(), self.run.adam);
            }
        }
        let lr = self.run.rate.rate(local);
        self.epoch_at_rate(lr, iteration)
    }

    /// One epoch at an explicit rate (the schedule's positivity guard does
    /// not apply here; rate 0 skips the parameter update).
    pub(crate) fn epoch_at_rate(&mut self, lr: f64, iteration: u32) -> Result<EpochReport> {
        let start = Instant::now();
        let e = self.next_epoch;
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "epoch rate must be finite and nonnegative, got {lr}"
            )));
        }
        if self.is_fourier && lr > 0.5 {
            return Err(Error::InvalidParameter(format!(
                "closed-form mixing needs rates in (0, 1/2], got {lr}"
            )));
        }
        let policy = match (&self.run.ada, iteration) {
            (Some(a), i) if i >= 1 => a.importance,
            _ => self.run.set_policy,
        };

        // Stage 1: everything that reads the frozen model.
        let (batch, outcome, acceptance, frozen_clamps) = {
            let frozen = FrozenDensity::new(
                self.model.as_ref(),
                self.problem.grid.clone(),
                self.run.quad,
            );
            let params = SimParams {
                law: &frozen,
                init: &self.problem.init,
                noise: &self.noise,
                grid: &self.problem.grid,
                n_particles: self.run.n_particles,
                seed: self.run.seed,
                epoch: e,
                parallel: self.run.parallel,
            };
            let batch = simulate_batch(&self.problem.dynamics, &params)?;

            let outcome = if self.is_fourier {
                self.fourier_targets(&batch)?
            } else {
                self.gradient_loss(&batch, &frozen, &policy, e)?
            };
            let acceptance = frozen.stats.acceptance_rate();
            let clamps = frozen
                .stats
                .clamped_logs
                .load(std::sync::atomic::Ordering::Relaxed);
            (batch, outcome, acceptance, clamps)
        };

        // Stage 2: validate, then mutate (nothing has been touched yet, so
        // an error above or here leaves model and optimizer bit-identical).
        let mut clamped = frozen_clamps;
        let (loss_value, truncated) = match outcome {
            EpochOutcome::Gradient(out) => {
                if !out.value.is_finite() {
                    return Err(Error::NonFinite {
                        what: "loss value",
                        epoch: e as usize,
                    });
                }
                if out.grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "loss gradient",
                        epoch: e as usize,
                    });
                }
                clamped += out.clamped_logs;
                if lr > 0.0 {
                    let mut params = self.model.params_vec();
                    self.adam.step(&mut params, &out.grad, lr)?;
                    self.model.set_params(&params)?;
                }
                (out.value, 0)
            }
            EpochOutcome::Projection {
                residual,
                targets,
                truncated,
            } => {
                if !residual.is_finite() {
                    return Err(Error::NonFinite {
                        what: "projection residual",
                        epoch: e as usize,
                    });
                }
                if lr > 0.0 {
                    let fv = self.model.fourier_view().expect("checked fourier");
                    for (m, theta) in targets.iter().enumerate() {
                        fourier_update(fv, m, &theta.view(), lr)?;
                    }
                }
                (residual, truncated)
            }
        };

        self.prev = Some(batch);
        self.next_epoch += 1;
        Ok(EpochReport {
            epoch: e,
            iteration,
            lr,
            loss: loss_value,
            clamped_logs: clamped,
            acceptance_rate: acceptance,
            truncated,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Gradient pathway: training sets, mollified tables, loss and gradient.
    fn gradient_loss(
        &self,
        batch: &TrajectoryEnsemble,
        frozen: &FrozenDensity<'_>,
        policy: &SetPolicy,
        e: u64,
    ) -> Result<EpochOutcome> {
        let grid = &self.problem.grid;
        if self.run.loss == LossKind::Path {
            return Ok(EpochOutcome::Gradient(loss_path(
                self.model.as_ref(),
                batch,
            )?));
        }
        let ctx = SetContext {
            domain: &self.problem.domain,
            grid,
            prev: self.prev.as_ref(),
            current: Some(batch),
            frozen: Some(frozen),
            moll: Some(self.run.moll),
        };
        let sets = build_training_sets(policy, &ctx, self.run.seed, e)?;
        let kde = kde_tables(batch, self.run.moll, &sets)?;
        let out = match self.run.loss {
            LossKind::Sq => loss_sq(
                self.model.as_ref(),
                grid,
                &sets,
                &kde,
                self.run.divide_by_nodes,
            )?,
            LossKind::Kl => {
                match policy {
                    SetPolicy::ModelImportance {
                        from_mollified: false,
                        ..
                    } => {
                        // Detached model density at the sampled points.
                        let mut eta = Vec::with_capacity(sets.len());
                        for (m, s) in sets.iter().enumerate() {
                            eta.push(frozen.eval_batch(grid.elapsed(m), &s.view())?);
                        }
                        loss_kl(
                            self.model.as_ref(),
                            grid,
                            &sets,
                            &kde,
                            &KlWeights::Eta(&eta),
                            &self.run.quad,
                        )?
                    }
                    SetPolicy::ModelImportance {
                        from_mollified: true,
                        ..
                    }
                    | SetPolicy::ParticlePaths => loss_kl(
                        self.model.as_ref(),
                        grid,
                        &sets,
                        &kde,
                        &KlWeights::Unit,
                        &self.run.quad,
                    )?,
                    _ => loss_kl(
                        self.model.as_ref(),
                        grid,
                        &sets,
                        &kde,
                        &KlWeights::Uniform,
                        &self.run.quad,
                    )?,
                }
            }
            LossKind::Path => unreachable!("handled above"),
        };
        Ok(EpochOutcome::Gradient(out))
    }

    /// Closed-form pathway: project each node's truncated mollified batch
    /// onto the basis; the reported loss is the coefficient-space squared
    /// residual (equals the windowed L2 residual by orthonormality).
    fn fourier_targets(&self, batch: &TrajectoryEnsemble) -> Result<EpochOutcome> {
        let fv = self
            .model
            .fourier_ref()
            .ok_or_else(|| Error::Capability("model is not the basis model".into()))?;
        let grid = &self.problem.grid;
        let n_basis = fv.n_basis();
        let per_axis = self
            .run
            .projection_quad
            .unwrap_or_else(|| (2 * fv.modes_per_axis()).max(32));
        let params = self.model.params_vec();
        let mut targets = Vec::with_capacity(grid.n_nodes());
        let mut residual = 0.0;
        let mut truncated = 0;
        for m in 0..grid.n_nodes() {
            let (trunc, dropped) =
                truncate_particles(&batch.node_view(m), &self.problem.domain, self.run.moll.eps)?;
            truncated += dropped;
            let kde = Kde::new(trunc.view(), self.run.moll)?;
            let f = move |xs: &ArrayView2<f64>| kde.eval_batch(xs);
            let theta_hat = fv.project(&f, per_axis)?;
            let block = &params[m * n_basis..(m + 1) * n_basis];
            residual += block
                .iter()
                .zip(theta_hat.iter())
                .map(|(c, t)| (c - t) * (c - t))
                .sum::<f64>();
            targets.push(theta_hat);
        }
        Ok(EpochOutcome::Projection {
            residual,
            targets,
            truncated,
        })
    }
}

enum EpochOutcome {
    Gradient(LossOut),
    Projection {
        residual: f64,
        targets: Vec<Array1<f64>>,
        truncated: usize,
    },
}
