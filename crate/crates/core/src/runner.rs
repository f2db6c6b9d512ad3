//! Experiment orchestration: drive the epoch loop to completion and persist
//! everything needed to inspect or exactly replay the run — epoch log,
//! metrics table, density slices, model checkpoints, and a manifest. Failed
//! or cancelled runs keep their partial artifacts next to an `INCOMPLETE`
//! marker.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{self, MetricKind, PosteriorConfig, RunConfig};
use crate::density::{
    load_model_file, rejection_sample_fn, save_model_file, DensityModel, FrozenDensity, LawFlow,
    QuadSpec,
};
use crate::diag;
use crate::error::{Error, Result};
use crate::noise::{stream_rng, tag};
use crate::problems::ProblemSpec;
use crate::sde::TrajectoryEnsemble;
use crate::train::baselines::{baseline_poc, baseline_spoc, density_table, PocParams, SpocParams};
use crate::train::{EpochReport, Trainer};

/// Marker file present while a run is in flight or after it aborted.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
/// Resolved-config echo; feeding it back through `--config` replays the run.
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SLICES_FILE: &str = "density_slices.csv";
pub const MODEL_FILE: &str = "model_final.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BASELINE_TABLE: &str = "baseline_density.csv";
pub const ERROR_FILE: &str = "error.txt";

/// Observation and cancellation points for a run in flight.
#[derive(Clone, Copy, Default)]
pub struct RunHooks<'a> {
    pub progress: Option<&'a (dyn Fn(&EpochReport) + Send + Sync)>,
    pub cancelled: Option<&'a AtomicBool>,
}

impl RunHooks<'_> {
    fn check_cancelled(&self) -> Result<()> {
        if let Some(flag) = self.cancelled {
            if flag.load(Ordering::Relaxed) {
                return Err(Error::Cancelled);
            }
        }
        Ok(())
    }
}

/// What a completed run reports back.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub epochs: u64,
    pub final_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    /// Content hash of the canonical config echo.
    config_sha256: String,
    seeds: ManifestSeeds,
    package_version: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestSeeds {
    training: u64,
    diagnostics: u64,
}

/// One row of the metrics table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: u64,
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: u64,
    loss: f64,
    lr: f64,
    seconds: f64,
    clamped_logs: u64,
    acceptance_rate: f64,
}

fn config_hash(cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(config::dump(cfg).as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let echo = config::dump(cfg);
    fs::write(dir.join(CONFIG_FILE), &echo)?;
    let manifest = Manifest {
        config: cfg.clone(),
        config_sha256: config_hash(cfg),
        seeds: ManifestSeeds {
            training: cfg.training.seed,
            diagnostics: cfg.diagnostics.seed,
        },
        package_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn record_failure(dir: &Path, err: &Error) {
    let _ = fs::write(dir.join(ERROR_FILE), format!("{err}\n"));
}

/// Run inside a dedicated thread pool when a worker count is configured;
/// otherwise use the library default.
fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
            pool.install(f)
        }
        None => f(),
    }
}

/// Execute a full training run into `dir`, creating it if needed.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path, hooks: RunHooks<'_>) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(INCOMPLETE_MARKER), "run in flight or aborted\n")?;
    write_manifest(dir, cfg)?;
    match with_workers(cfg.workers, || run_inner(cfg, dir, hooks)) {
        Ok(outcome) => {
            fs::remove_file(dir.join(INCOMPLETE_MARKER))?;
            Ok(outcome)
        }
        Err(e) => {
            record_failure(dir, &e);
            Err(e)
        }
    }
}

fn run_inner(cfg: &RunConfig, dir: &Path, hooks: RunHooks<'_>) -> Result<RunOutcome> {
    let started = Instant::now();
    let problem = cfg.problem.build(cfg.training.particles)?;
    let model = cfg.model.build(problem.domain.clone(), &problem.grid)?;
    let run = cfg.train_run()?;
    let mut trainer = Trainer::new(cfg.problem.build(cfg.training.particles)?, model, run)?;

    let mut epoch_w = csv::Writer::from_writer(fs::File::create(dir.join(EPOCH_LOG))?);
    let mut metrics_w = csv::Writer::from_writer(fs::File::create(dir.join(METRICS_FILE))?);

    let epochs = cfg.training.epochs;
    let cadence = cfg.diagnostics.cadence;
    let mut last_report: Option<EpochReport> = None;
    for e in 1..=epochs {
        hooks.check_cancelled()?;
        let rep = trainer.epoch()?;
        epoch_w.serialize(EpochRow {
            epoch: rep.epoch,
            loss: rep.loss,
            lr: rep.lr,
            seconds: rep.seconds,
            clamped_logs: rep.clamped_logs,
            acceptance_rate: rep.acceptance_rate,
        })?;
        epoch_w.flush()?;
        if let Some(p) = hooks.progress {
            p(&rep);
        }
        if (cadence > 0 && e % cadence == 0) || e == epochs {
            for row in compute_metrics(cfg, &problem, trainer.model(), trainer.last_batch(), e)? {
                metrics_w.serialize(row)?;
            }
            metrics_w.flush()?;
        }
        if cfg.training.checkpoint_every > 0 && e % cfg.training.checkpoint_every == 0 {
            let tmp = dir.join("checkpoint.json.tmp");
            save_model_file(trainer.model(), &tmp)?;
            fs::rename(&tmp, dir.join(CHECKPOINT_FILE))?;
        }
        last_report = Some(rep);
    }

    write_density_slices(cfg, &problem, trainer.model(), &dir.join(SLICES_FILE))?;
    save_model_file(trainer.model(), &dir.join(MODEL_FILE))?;

    let outcome = RunOutcome {
        dir: dir.to_path_buf(),
        epochs,
        final_loss: last_report.map(|r| r.loss).unwrap_or(f64::NAN),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

/// Evaluation times for density slices: configured elapsed times, or the
/// terminal time when none are given.
fn slice_times(cfg: &RunConfig, problem: &ProblemSpec) -> Vec<f64> {
    if cfg.diagnostics.slice_times.is_empty() {
        vec![problem.grid.horizon()]
    } else {
        cfg.diagnostics.slice_times.clone()
    }
}

/// Query points along the first axis (other coordinates zero).
fn axis_slice(problem: &ProblemSpec, n: usize) -> Array2<f64> {
    let d = problem.dim();
    let (lo, hi) = (problem.domain.lo()[0], problem.domain.hi()[0]);
    let n = n.max(2);
    let mut pts = Array2::zeros((n, d));
    for i in 0..n {
        pts[[i, 0]] = lo + (hi - lo) * i as f64 / (n - 1) as f64;
    }
    pts
}

fn write_density_slices(
    cfg: &RunConfig,
    problem: &ProblemSpec,
    model: &dyn DensityModel,
    path: &Path,
) -> Result<()> {
    let pts = axis_slice(problem, cfg.diagnostics.slice_points);
    let d = problem.dim();
    let frozen = FrozenDensity::new(model, problem.grid.clone(), QuadSpec::default());
    let mut w = fs::File::create(path)?;
    let mut header = String::from("t");
    for j in 0..d {
        header.push_str(&format!(",x{j}"));
    }
    header.push_str(",density_model,density_reference");
    writeln!(w, "{header}")?;
    for &te in &slice_times(cfg, problem) {
        let rho = frozen.eval_batch(te, &pts.view())?;
        let reference = match &problem.reference {
            Some(r) => Some(r(problem.grid.t0() + te, &pts.view())?),
            None => None,
        };
        for i in 0..pts.nrows() {
            let mut line = format!("{te}");
            for j in 0..d {
                line.push_str(&format!(",{}", pts[[i, j]]));
            }
            line.push_str(&format!(",{}", rho[i]));
            match &reference {
                Some(u) => line.push_str(&format!(",{}", u[i])),
                None => line.push(','),
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Compute the configured metric rows for one epoch. Deterministic in the
/// diagnostics seed.
pub fn compute_metrics(
    cfg: &RunConfig,
    problem: &ProblemSpec,
    model: &dyn DensityModel,
    batch: Option<&TrajectoryEnsemble>,
    epoch: u64,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let d = cfg.diagnostics.clone();
    if d.metrics.is_empty() && d.posterior.is_none() {
        return Ok(rows);
    }
    let te = problem.grid.horizon();
    let t_abs = problem.grid.t0() + te;
    let frozen = FrozenDensity::new(model, problem.grid.clone(), QuadSpec::default());
    for metric in &d.metrics {
        match metric {
            MetricKind::RelativeL2 => {
                let reference = problem.reference.as_ref().ok_or_else(|| {
                    Error::InvalidParameter("relative error needs an exact reference".into())
                })?;
                let model_fn = |xs: &ArrayView2<f64>| frozen.eval_batch(te, xs);
                let ref_fn = |xs: &ArrayView2<f64>| reference(t_abs, xs);
                let v = diag::relative_l2(
                    &model_fn,
                    &ref_fn,
                    &problem.domain,
                    d.eval_points,
                    1.0,
                    d.seed,
                )?;
                rows.push(MetricRow {
                    epoch,
                    metric: "relative_l2".into(),
                    value: v,
                    stderr: None,
                });
            }
            MetricKind::W1 => {
                let reference = problem.reference.as_ref().ok_or_else(|| {
                    Error::InvalidParameter("transport error needs an exact reference".into())
                })?;
                let n = d.eval_points.min(10_000).max(2);
                let mut rng = stream_rng(d.seed, &[tag::DIAG, 3, epoch]);
                let ours = frozen.sample(te, n, &mut rng)?;
                let target = |xs: &ArrayView2<f64>| -> Array1<f64> {
                    reference(t_abs, xs).unwrap_or_else(|_| Array1::zeros(xs.nrows()))
                };
                let envelope = reference_envelope(&target, &problem.domain);
                let mut rng = stream_rng(d.seed, &[tag::DIAG, 4, epoch]);
                let theirs =
                    rejection_sample_fn(&target, &problem.domain, envelope, n, &mut rng)?;
                let v = if problem.dim() == 1 {
                    let a: Vec<f64> = ours.column(0).to_vec();
                    let b: Vec<f64> = theirs.column(0).to_vec();
                    diag::wasserstein_1d(&a, &b, 1)?
                } else {
                    diag::sliced_w2(&ours.view(), &theirs.view(), 64, d.seed)?
                };
                rows.push(MetricRow {
                    epoch,
                    metric: "w1".into(),
                    value: v,
                    stderr: None,
                });
            }
            MetricKind::SecondMomentSlope => {
                let batch = batch.ok_or_else(|| {
                    Error::InvalidParameter(
                        "the slope metric needs a simulated batch from this epoch".into(),
                    )
                })?;
                let moments = diag::second_moments(batch);
                let v = diag::second_moment_slope(&problem.grid, &moments)?;
                rows.push(MetricRow {
                    epoch,
                    metric: "second_moment_slope".into(),
                    value: v,
                    stderr: None,
                });
            }
        }
    }
    if let Some(p) = d.posterior {
        let (h_self, bound) = posterior_estimate(problem, &frozen, p, d.seed)?;
        rows.push(MetricRow {
            epoch,
            metric: "posterior_h_alpha".into(),
            value: h_self,
            stderr: None,
        });
        rows.push(MetricRow {
            epoch,
            metric: "posterior_bound".into(),
            value: bound,
            stderr: None,
        });
    }
    Ok(rows)
}

/// Envelope for accept-reject draws from the reference: a safety factor over
/// the maximum on a dense scan.
fn reference_envelope(target: &(dyn Fn(&ArrayView2<f64>) -> Array1<f64> + Sync), domain: &crate::domain::Domain) -> f64 {
    let per_axis = QuadSpec::default().effective_per_axis(domain.dim());
    let (pts, _) = domain.midpoint_grid(per_axis);
    let vals = target(&pts.view());
    1.2 * vals.iter().fold(0.0f64, |a, &b| a.max(b)).max(1e-12)
}

/// Self-distance of the model flow under the one-step law map, and the
/// resulting posterior error bound.
fn posterior_estimate(
    problem: &ProblemSpec,
    frozen: &FrozenDensity<'_>,
    p: PosteriorConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let grid = &problem.grid;
    let k = p.k_phi;
    let mut rng = stream_rng(seed, &[tag::DIAG, 5]);
    let mut states = ndarray::Array3::zeros((grid.n_nodes(), k, problem.dim()));
    for m in 0..grid.n_nodes() {
        let cloud = frozen.sample(grid.elapsed(m), k, &mut rng)?;
        states.index_axis_mut(ndarray::Axis(0), m).assign(&cloud);
    }
    let mu = TrajectoryEnsemble {
        grid: grid.clone(),
        states,
    };
    let phi_mu = diag::phi_map(problem, frozen, &problem.init, k, seed, false)?;
    let params = diag::HAlphaParams {
        alpha: p.alpha,
        n_directions: p.n_directions,
        seed,
    };
    let h_self = diag::h_alpha(&mu, &phi_mu, &params)?;
    let bound = diag::posterior_bound(h_self, p.alpha, p.c_lip, grid.horizon())?;
    Ok((h_self, bound))
}

/// Which classical reference solver to run.
#[derive(Clone, Debug, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// All-pairs interacting particle system (the law is the cloud itself).
    Poc,
    /// Explicit mixture updated batch by batch at harmonic rates.
    Spoc,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poc" => Ok(BaselineKind::Poc),
            "spoc" => Ok(BaselineKind::Spoc),
            other => Err(Error::config(
                "baseline",
                format!("unknown baseline `{other}` (expected poc or spoc)"),
            )),
        }
    }
}

/// Run a classical baseline for the configured problem and write its
/// mollified density table over the first-axis slice.
pub fn run_baseline(
    cfg: &RunConfig,
    kind: BaselineKind,
    dir: &Path,
    hooks: RunHooks<'_>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(INCOMPLETE_MARKER), "baseline in flight or aborted\n")?;
    write_manifest(dir, cfg)?;
    let started = Instant::now();
    let result = with_workers(cfg.workers, || {
        hooks.check_cancelled()?;
        baseline_inner(cfg, kind, dir)
    });
    match result {
        Ok(()) => {
            fs::remove_file(dir.join(INCOMPLETE_MARKER))?;
            Ok(RunOutcome {
                dir: dir.to_path_buf(),
                epochs: 0,
                final_loss: f64::NAN,
                wall_seconds: started.elapsed().as_secs_f64(),
            })
        }
        Err(e) => {
            record_failure(dir, &e);
            Err(e)
        }
    }
}

fn baseline_inner(cfg: &RunConfig, kind: BaselineKind, dir: &Path) -> Result<()> {
    let problem = cfg.problem.build(cfg.training.particles)?;
    let moll = cfg.train_run()?.moll;
    let pts = axis_slice(&problem, cfg.diagnostics.slice_points);
    let table = match kind {
        BaselineKind::Poc => {
            let ens = baseline_poc(
                &problem,
                &PocParams {
                    n_particles: cfg.training.particles,
                    seed: cfg.training.seed,
                    moll,
                    parallel: cfg.training.parallel,
                },
            )?;
            density_table(&ens, moll, &pts.view())?
        }
        BaselineKind::Spoc => {
            let rates: Vec<f64> = (1..=cfg.training.epochs).map(|l| 1.0 / l as f64).collect();
            let mix = baseline_spoc(
                &problem,
                &SpocParams {
                    n_particles: cfg.training.particles,
                    rates,
                    moll,
                    seed: cfg.training.seed,
                    parallel: cfg.training.parallel,
                },
            )?;
            let mut t = Array2::zeros((problem.grid.n_nodes(), pts.nrows()));
            for m in 0..problem.grid.n_nodes() {
                let row = mix.density_batch(problem.grid.elapsed(m), &pts.view())?;
                t.row_mut(m).assign(&row);
            }
            t
        }
    };
    let d = problem.dim();
    let mut w = fs::File::create(dir.join(BASELINE_TABLE))?;
    let mut header = String::from("t");
    for j in 0..d {
        header.push_str(&format!(",x{j}"));
    }
    header.push_str(",density");
    writeln!(w, "{header}")?;
    for m in 0..problem.grid.n_nodes() {
        let te = problem.grid.elapsed(m);
        for i in 0..pts.nrows() {
            let mut line = format!("{te}");
            for j in 0..d {
                line.push_str(&format!(",{}", pts[[i, j]]));
            }
            line.push_str(&format!(",{}", table[[m, i]]));
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Post-hoc diagnosis of a finished run directory: reload the final model
/// and recompute the configured metrics (and posterior estimate) at the
/// terminal epoch. Writes `diagnose.json` and returns the rows.
pub fn diagnose(dir: &Path) -> Result<Vec<MetricRow>> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
            .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
    let cfg = manifest.config;
    cfg.validate()?;
    let model_path = if dir.join(MODEL_FILE).exists() {
        dir.join(MODEL_FILE)
    } else {
        dir.join(CHECKPOINT_FILE)
    };
    let model = load_model_file(&model_path)?;
    let problem = cfg.problem.build(cfg.training.particles)?;
    if model.dim() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            got: model.dim(),
        });
    }
    let rows = compute_metrics(&cfg, &problem, model.as_ref(), None, cfg.training.epochs)?;
    fs::write(dir.join("diagnose.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}
