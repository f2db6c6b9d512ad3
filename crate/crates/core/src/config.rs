//! Run configuration: one JSON document describing the problem, the density
//! model, the training loop, and the diagnostics to collect — plus a named
//! preset registry so each benchmark experiment is a one-flag run. Unknown
//! keys are rejected, schema errors carry the field path, and every preset
//! round-trips load -> dump -> load identically.

use serde::{Deserialize, Serialize};

use crate::density::{CouplingFlowDensity, DensityModel, FourierDensity, MlpDensity, QuadSpec};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::{MollifierKind, MollifierSpec};
use crate::nn::Activation;
use crate::problems::{self, ProblemSpec};
use crate::train::adam::AdamParams;
use crate::train::{AdaSchedule, LossKind, RateRule, Schedule, SetPolicy, TrainRun};

/// Time grid and training window shared by all problem kinds: simulate on
/// `[t0, t0 + horizon]` with step `dt`, train on the centered cube of the
/// given half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceTime {
    #[serde(default)]
    pub t0: f64,
    pub horizon: f64,
    pub dt: f64,
    pub window: f64,
}

impl SpaceTime {
    pub fn grid(&self) -> Result<TimeGrid> {
        if !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::config(
                "problem.space",
                format!("need dt > 0 and horizon > 0, got dt={}, horizon={}", self.dt, self.horizon),
            ));
        }
        let steps = (self.horizon / self.dt).round();
        if steps < 1.0 || (steps * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(Error::config(
                "problem.space.dt",
                format!("dt={} does not divide the horizon {}", self.dt, self.horizon),
            ));
        }
        TimeGrid::new(self.t0, self.horizon, steps as usize)
    }

    pub fn domain(&self, dim: usize) -> Result<Domain> {
        if !(self.window > 0.0) {
            return Err(Error::config(
                "problem.space.window",
                format!("window half-width must be positive, got {}", self.window),
            ));
        }
        Domain::cube(dim, self.window)
    }
}

fn default_m_pme() -> f64 {
    3.0
}
fn default_c() -> f64 {
    problems::pme::C_STANDARD
}
fn default_m_fpme() -> f64 {
    2.0
}
fn default_stable_alpha() -> f64 {
    1.0
}
fn default_n_cloud() -> usize {
    500
}
fn default_sharing() -> problems::keller_segel::CloudSharing {
    problems::keller_segel::CloudSharing::Shared
}
fn default_beta() -> f64 {
    1.0
}
fn default_coupling() -> f64 {
    -0.1
}

/// Which equation to solve and on what grid/window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// Degenerate nonlinear diffusion with the self-similar exact reference;
    /// `ode` switches to the deterministic-velocity representation.
    PorousMedium {
        dim: usize,
        space: SpaceTime,
        #[serde(default = "default_m_pme")]
        m: f64,
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default)]
        ode: bool,
    },
    /// 2D aggregation-diffusion dynamics with the logarithmic attraction
    /// kernel; the interaction is estimated from `n_cloud` model samples.
    AggregationDiffusion {
        init: problems::keller_segel::KsInit,
        space: SpaceTime,
        #[serde(default = "default_n_cloud")]
        n_cloud: usize,
        #[serde(default = "default_sharing")]
        sharing: problems::keller_segel::CloudSharing,
    },
    /// 1D double-well dynamics whose drift couples to the running mean.
    DoubleWell {
        space: SpaceTime,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_coupling")]
        coupling: f64,
    },
    /// 1D heavy-tailed nonlinear diffusion driven by symmetric alpha-stable
    /// noise.
    HeavyTailedPorousMedium {
        space: SpaceTime,
        #[serde(default = "default_m_fpme")]
        m: f64,
        #[serde(default = "default_stable_alpha")]
        alpha: f64,
    },
    /// 1D linear mean-reverting dynamics with known Lipschitz constant
    /// (posterior-estimate playground).
    LinearMeanField { space: SpaceTime },
}

impl ProblemConfig {
    pub fn space(&self) -> &SpaceTime {
        match self {
            ProblemConfig::PorousMedium { space, .. }
            | ProblemConfig::AggregationDiffusion { space, .. }
            | ProblemConfig::DoubleWell { space, .. }
            | ProblemConfig::HeavyTailedPorousMedium { space, .. }
            | ProblemConfig::LinearMeanField { space } => space,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProblemConfig::PorousMedium { dim, .. } => *dim,
            ProblemConfig::AggregationDiffusion { .. } => 2,
            ProblemConfig::DoubleWell { .. }
            | ProblemConfig::HeavyTailedPorousMedium { .. }
            | ProblemConfig::LinearMeanField { .. } => 1,
        }
    }

    /// Instantiate the problem. `n_particles` sizes per-particle interaction
    /// clouds where the problem uses them.
    pub fn build(&self, n_particles: usize) -> Result<ProblemSpec> {
        let grid = self.space().grid()?;
        let domain = self.space().domain(self.dim())?;
        match *self {
            ProblemConfig::PorousMedium { m, c, ode, .. } => {
                if !(self.space().t0 > 0.0) {
                    return Err(Error::config(
                        "problem.space.t0",
                        "the self-similar profile needs a positive start time",
                    ));
                }
                problems::pme::build(m, c, domain, grid, ode)
            }
            ProblemConfig::AggregationDiffusion {
                init,
                n_cloud,
                sharing,
                ..
            } => problems::keller_segel::build(init, domain, grid, n_cloud, sharing, n_particles),
            ProblemConfig::DoubleWell { beta, coupling, .. } => problems::curie_weiss::build(
                problems::curie_weiss::CwParams { beta, coupling },
                domain,
                grid,
            ),
            ProblemConfig::HeavyTailedPorousMedium { m, alpha, .. } => {
                problems::fpme::build(problems::fpme::FpmeParams { m, alpha }, domain, grid)
            }
            ProblemConfig::LinearMeanField { .. } => problems::linear::build(domain, grid),
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_blocks() -> usize {
    6
}
fn default_cond_hidden() -> Vec<usize> {
    vec![64, 64]
}

/// Density-model architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Fully connected network over (t, x); rectified-and-normalized density.
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default)]
        seed: u64,
    },
    /// Invertible coupling flow; exact density and direct sampling.
    Flow {
        #[serde(default = "default_blocks")]
        blocks: usize,
        #[serde(default = "default_cond_hidden")]
        cond_hidden: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
    /// Per-node cosine basis with closed-form projection updates.
    Fourier { modes_per_axis: usize },
}

impl ModelConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelConfig::Mlp { .. } => "mlp",
            ModelConfig::Flow { .. } => "flow",
            ModelConfig::Fourier { .. } => "fourier",
        }
    }

    pub fn build(&self, domain: Domain, grid: &TimeGrid) -> Result<Box<dyn DensityModel>> {
        Ok(match self {
            ModelConfig::Mlp {
                hidden,
                activation,
                seed,
            } => Box::new(MlpDensity::new(domain, hidden, *activation, *seed)?),
            ModelConfig::Flow {
                blocks,
                cond_hidden,
                seed,
            } => Box::new(CouplingFlowDensity::new(domain, *blocks, cond_hidden, *seed)?),
            ModelConfig::Fourier { modes_per_axis } => {
                Box::new(FourierDensity::new(domain, grid.clone(), *modes_per_axis)?)
            }
        })
    }
}

/// Mollifier bandwidth/kernel; the spatial dimension comes from the problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifierConfig {
    #[serde(default = "default_kernel")]
    pub kind: MollifierKind,
    pub eps: f64,
}

fn default_kernel() -> MollifierKind {
    MollifierKind::Gaussian
}

impl Default for MollifierConfig {
    fn default() -> Self {
        MollifierConfig {
            kind: MollifierKind::Gaussian,
            eps: 0.01,
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_checkpoint() -> u64 {
    1000
}

/// The epoch loop: batch size, loss, training-point policy, rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: u64,
    /// Batch size K per epoch.
    pub particles: usize,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    pub policy: SetPolicy,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub mollifier: MollifierConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub divide_by_nodes: bool,
    #[serde(default)]
    pub adam: AdamParams,
    #[serde(default)]
    pub ada: Option<AdaSchedule>,
    #[serde(default)]
    pub projection_quad: Option<usize>,
    /// Write a checkpoint every this many epochs (0: terminal only).
    #[serde(default = "default_checkpoint")]
    pub checkpoint_every: u64,
}

fn default_loss() -> LossKind {
    LossKind::Sq
}

/// Which error metrics to compute and how often.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Evaluate metrics every this many epochs (0: terminal epoch only).
    pub cadence: u64,
    /// Monte Carlo points for the relative error.
    pub eval_points: usize,
    pub seed: u64,
    pub metrics: Vec<MetricKind>,
    /// Query count for exported density slices along the first axis.
    pub slice_points: usize,
    /// Elapsed times for density slices (empty: terminal time only).
    pub slice_times: Vec<f64>,
    pub posterior: Option<PosteriorConfig>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            cadence: 10,
            eval_points: 100_000,
            seed: 0,
            metrics: Vec::new(),
            slice_points: 201,
            slice_times: Vec::new(),
            posterior: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Monte Carlo relative L2 error against the problem's exact reference at
    /// the terminal time.
    RelativeL2,
    /// Transport distance between model samples and reference samples at the
    /// terminal time (exact in 1D, sliced above).
    W1,
    /// Least-squares slope of the batch second moment over time.
    SecondMomentSlope,
}

/// Self-distance posterior estimate configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorConfig {
    /// Exponential weight of the path distance.
    pub alpha: f64,
    /// Lipschitz constant of the dynamics (user-supplied; presets carry a
    /// hand estimate only for the linear problem).
    pub c_lip: f64,
    #[serde(default = "default_k_phi")]
    pub k_phi: usize,
    #[serde(default = "default_directions")]
    pub n_directions: usize,
}

fn default_k_phi() -> usize {
    2000
}
fn default_directions() -> usize {
    16
}

/// A full experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    /// Worker threads for particle simulation (None: library default).
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

/// On-disk document: either a preset name (with optional block-level
/// overrides) or a fully inline description.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsConfig>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

impl ConfigFile {
    /// Resolve to a validated `RunConfig`: start from the preset if named,
    /// then replace whole blocks that the file provides.
    pub fn resolve(self) -> Result<RunConfig> {
        let base = match &self.preset {
            Some(name) => Some(preset(name)?),
            None => None,
        };
        let problem = self
            .problem
            .or_else(|| base.as_ref().map(|b| b.problem.clone()))
            .ok_or_else(|| Error::config("problem", "a problem block (or a preset) is required"))?;
        let model = self
            .model
            .or_else(|| base.as_ref().map(|b| b.model.clone()))
            .ok_or_else(|| Error::config("model", "a model block (or a preset) is required"))?;
        let training = self
            .training
            .or_else(|| base.as_ref().map(|b| b.training.clone()))
            .ok_or_else(|| {
                Error::config("training", "a training block (or a preset) is required")
            })?;
        let diagnostics = self
            .diagnostics
            .or_else(|| base.as_ref().map(|b| b.diagnostics.clone()))
            .unwrap_or_default();
        let cfg = RunConfig {
            problem,
            model,
            training,
            diagnostics,
            workers: self.workers.or(base.as_ref().and_then(|b| b.workers)),
            output_dir: self
                .output_dir
                .or_else(|| base.as_ref().and_then(|b| b.output_dir.clone())),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse a JSON document (preset reference or inline config) into a
/// validated `RunConfig`. Schema errors carry the offending field path.
pub fn from_json(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ConfigFile = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
    file.resolve()
}

/// Read and validate a config file.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    from_json(&text)
}

/// Canonical JSON echo of a resolved config (defaults filled).
pub fn dump(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

/// Command-line level overrides applied on top of a resolved config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<u64>,
    pub particles: Option<usize>,
    pub workers: Option<usize>,
    pub out: Option<String>,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.training.seed = s;
        }
        if let Some(e) = o.epochs {
            self.training.epochs = e;
        }
        if let Some(k) = o.particles {
            self.training.particles = k;
        }
        if let Some(w) = o.workers {
            self.workers = Some(w);
        }
        if let Some(ref out) = o.out {
            self.output_dir = Some(out.clone());
        }
        self.validate()
    }

    /// Schema-level consistency: positivity, schedule range, policy sizes,
    /// and loss/model capability pairings.
    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.epochs == 0 {
            return Err(Error::config("training.epochs", "need at least one epoch"));
        }
        if t.particles == 0 {
            return Err(Error::config(
                "training.particles",
                "need at least one particle",
            ));
        }
        if !(t.mollifier.eps > 0.0) || !t.mollifier.eps.is_finite() {
            return Err(Error::config(
                "training.mollifier.eps",
                format!("bandwidth must be positive, got {}", t.mollifier.eps),
            ));
        }
        if !(t.schedule.gamma > 0.0 && t.schedule.gamma <= 1.0) {
            return Err(Error::config(
                "training.schedule.gamma",
                format!("contraction factor must lie in (0, 1], got {}", t.schedule.gamma),
            ));
        }
        if !(t.schedule.alpha0 > 0.0) || !t.schedule.alpha0.is_finite() {
            return Err(Error::config(
                "training.schedule.alpha0",
                format!("initial rate must be positive, got {}", t.schedule.alpha0),
            ));
        }
        if t.schedule.big_gamma == 0 {
            return Err(Error::config(
                "training.schedule.big_gamma",
                "window length must be at least one epoch",
            ));
        }
        self.check_policy(&t.policy, "training.policy")?;
        if let Some(ada) = &t.ada {
            if ada.iterations == 0 || ada.epochs_per_iteration == 0 {
                return Err(Error::config(
                    "training.ada",
                    "outer iterations and epochs per iteration must be positive",
                ));
            }
            self.check_policy(&ada.importance, "training.ada.importance")?;
        }
        if t.loss == LossKind::Path && !matches!(self.model, ModelConfig::Flow { .. }) {
            return Err(Error::config(
                "training.loss",
                "path likelihood needs a model with an exact density (flow)",
            ));
        }
        if let ModelConfig::Fourier { modes_per_axis } = self.model {
            if modes_per_axis == 0 {
                return Err(Error::config("model.modes_per_axis", "need at least one mode"));
            }
            if t.loss != LossKind::Sq {
                return Err(Error::config(
                    "training.loss",
                    "the basis model trains by projection, which realizes the squared loss only",
                ));
            }
            if t.schedule.alpha0 > 0.5 {
                return Err(Error::config(
                    "training.schedule.alpha0",
                    "projection updates need a rate of at most 0.5",
                ));
            }
        }
        if t.loss == LossKind::Kl {
            if let SetPolicy::ModelImportance {
                from_mollified: false,
                ..
            } = t.policy
            {
                if !matches!(self.model, ModelConfig::Flow { .. }) {
                    return Err(Error::config(
                        "training.policy",
                        "importance weights on model-sampled points need direct sampling (flow)",
                    ));
                }
            }
        }
        let d = &self.diagnostics;
        if !d.metrics.is_empty() && d.eval_points == 0 {
            return Err(Error::config(
                "diagnostics.eval_points",
                "metric evaluation needs at least one point",
            ));
        }
        let has_reference = matches!(self.problem, ProblemConfig::PorousMedium { .. });
        for m in &d.metrics {
            if matches!(m, MetricKind::RelativeL2 | MetricKind::W1) && !has_reference {
                return Err(Error::config(
                    "diagnostics.metrics",
                    "reference-based metrics need a problem with an exact solution",
                ));
            }
        }
        if let Some(p) = &d.posterior {
            if !(p.alpha > 0.0) || !(p.c_lip > 0.0) || p.k_phi == 0 || p.n_directions == 0 {
                return Err(Error::config(
                    "diagnostics.posterior",
                    "need alpha > 0, c_lip > 0, k_phi >= 1, n_directions >= 1",
                ));
            }
        }
        // Problem-side quick checks that don't need a build.
        self.problem.space().grid()?;
        self.problem.space().domain(self.problem.dim())?;
        if let ProblemConfig::AggregationDiffusion { n_cloud, .. } = self.problem {
            if n_cloud == 0 {
                return Err(Error::config(
                    "problem.n_cloud",
                    "interaction estimation needs at least one sample",
                ));
            }
        }
        Ok(())
    }

    fn check_policy(&self, policy: &SetPolicy, path: &str) -> Result<()> {
        let k = self.training.particles;
        match *policy {
            SetPolicy::Uniform { n1 } => {
                if n1 == 0 {
                    return Err(Error::config(path, "need at least one training point"));
                }
            }
            SetPolicy::AdaptiveUnion {
                n1,
                n2,
                sigma_noise,
            } => {
                if n1 + n2 == 0 {
                    return Err(Error::config(path, "need at least one training point"));
                }
                if n2 > k {
                    return Err(Error::config(
                        path,
                        format!("jittered subset ({n2}) exceeds the batch size ({k})"),
                    ));
                }
                if !(sigma_noise >= 0.0) || !sigma_noise.is_finite() {
                    return Err(Error::config(path, "jitter intensity must be nonnegative"));
                }
            }
            SetPolicy::ModelImportance { n, .. } => {
                if n == 0 {
                    return Err(Error::config(path, "need at least one training point"));
                }
            }
            SetPolicy::ParticlePaths => {}
        }
        Ok(())
    }

    /// The trainer's run description (the mollifier picks up the problem
    /// dimension here).
    pub fn train_run(&self) -> Result<TrainRun> {
        let t = &self.training;
        Ok(TrainRun {
            seed: t.seed,
            loss: t.loss,
            rate: RateRule::Geometric(t.schedule),
            set_policy: t.policy,
            moll: MollifierSpec::new(t.mollifier.kind, t.mollifier.eps, self.problem.dim())?,
            quad: QuadSpec::default(),
            n_particles: t.particles,
            divide_by_nodes: t.divide_by_nodes,
            parallel: t.parallel,
            adam: t.adam,
            ada: t.ada,
            projection_quad: t.projection_quad,
        })
    }
}

/// Names of the shipped presets, in registry order.
pub const PRESET_NAMES: [&str; 11] = [
    "pme1d",
    "pme3d",
    "pme5d",
    "pme6d",
    "pme8d",
    "pme1d_ode",
    "pme3d_ode",
    "ks2d_gauss",
    "ks2d_mix",
    "cw1d",
    "fpme1d",
];

fn mlp(hidden: Vec<usize>, activation: Activation) -> ModelConfig {
    ModelConfig::Mlp {
        hidden,
        activation,
        seed: 1,
    }
}

fn training(
    epochs: u64,
    particles: usize,
    loss: LossKind,
    policy: SetPolicy,
    schedule: Schedule,
    eps: f64,
) -> TrainingConfig {
    TrainingConfig {
        epochs,
        particles,
        loss,
        policy,
        schedule,
        mollifier: MollifierConfig {
            kind: MollifierKind::Gaussian,
            eps,
        },
        seed: 1,
        parallel: true,
        divide_by_nodes: false,
        adam: AdamParams::default(),
        ada: None,
        projection_quad: None,
        checkpoint_every: 1000,
    }
}

fn halving() -> Schedule {
    Schedule {
        alpha0: 0.001,
        gamma: 0.5,
        big_gamma: 500,
    }
}

fn gentle() -> Schedule {
    Schedule {
        alpha0: 0.001,
        gamma: 0.7,
        big_gamma: 500,
    }
}

fn diag_reference(cadence: u64) -> DiagnosticsConfig {
    DiagnosticsConfig {
        cadence,
        metrics: vec![MetricKind::RelativeL2],
        ..DiagnosticsConfig::default()
    }
}

/// Look up a named preset. The network sizes are desk-scale (the benchmark
/// results note that much smaller networks than the reference scale still
/// perform well); all simulation, mollification, and schedule parameters
/// follow the benchmark prose.
pub fn preset(name: &str) -> Result<RunConfig> {
    let softplus = Activation::Softplus { beta: 20.0 };
    let cfg = match name {
        "pme1d" => RunConfig {
            problem: ProblemConfig::PorousMedium {
                dim: 1,
                space: SpaceTime {
                    t0: 1.0,
                    horizon: 1.0,
                    dt: 0.01,
                    window: 2.0,
                },
                m: 3.0,
                c: problems::pme::C_STANDARD,
                ode: false,
            },
            model: mlp(vec![64, 64], Activation::Relu),
            training: training(
                7000,
                1000,
                LossKind::Sq,
                SetPolicy::Uniform { n1: 1000 },
                halving(),
                0.01,
            ),
            diagnostics: diag_reference(10),
            workers: None,
            output_dir: None,
        },
        "pme1d_ode" => {
            let mut cfg = preset("pme1d")?;
            if let ProblemConfig::PorousMedium { ode, .. } = &mut cfg.problem {
                *ode = true;
            }
            cfg.model = mlp(vec![64, 64], softplus);
            cfg
        }
        "pme3d" => RunConfig {
            problem: ProblemConfig::PorousMedium {
                dim: 3,
                space: SpaceTime {
                    t0: 0.1,
                    horizon: 0.2,
                    dt: 0.005,
                    window: 2.0,
                },
                m: 3.0,
                c: problems::pme::C_STANDARD,
                ode: false,
            },
            model: mlp(vec![64, 64, 64], Activation::Relu),
            training: training(
                8000,
                4000,
                LossKind::Sq,
                SetPolicy::AdaptiveUnion {
                    n1: 2000,
                    n2: 2000,
                    sigma_noise: 0.2,
                },
                halving(),
                0.02,
            ),
            diagnostics: diag_reference(25),
            workers: None,
            output_dir: None,
        },
        "pme3d_ode" => {
            let mut cfg = preset("pme3d")?;
            if let ProblemConfig::PorousMedium { ode, .. } = &mut cfg.problem {
                *ode = true;
            }
            cfg.model = mlp(vec![64, 64, 64], softplus);
            cfg
        }
        "pme5d" => RunConfig {
            problem: ProblemConfig::PorousMedium {
                dim: 5,
                space: SpaceTime {
                    t0: 1.0,
                    horizon: 1.0,
                    dt: 0.02,
                    window: 3.0,
                },
                m: 3.0,
                c: problems::pme::C_STANDARD,
                ode: false,
            },
            model: mlp(vec![64, 64, 64], Activation::Relu),
            training: training(
                12000,
                8000,
                LossKind::Sq,
                SetPolicy::AdaptiveUnion {
                    n1: 2000,
                    n2: 4000,
                    sigma_noise: 0.3,
                },
                gentle(),
                0.05,
            ),
            diagnostics: diag_reference(50),
            workers: None,
            output_dir: None,
        },
        "pme6d" | "pme8d" => {
            let dim = if name == "pme6d" { 6 } else { 8 };
            RunConfig {
                problem: ProblemConfig::PorousMedium {
                    dim,
                    space: SpaceTime {
                        t0: 1.0,
                        horizon: 1.5,
                        dt: 0.025,
                        window: 3.0,
                    },
                    m: 3.0,
                    c: problems::pme::C_STANDARD,
                    ode: false,
                },
                model: ModelConfig::Flow {
                    blocks: 6,
                    cond_hidden: vec![64, 64],
                    seed: 1,
                },
                training: training(
                    5000,
                    10_000,
                    LossKind::Path,
                    SetPolicy::ParticlePaths,
                    halving(),
                    0.05,
                ),
                diagnostics: diag_reference(50),
                workers: None,
                output_dir: None,
            }
        }
        "ks2d_gauss" | "ks2d_mix" => RunConfig {
            problem: ProblemConfig::AggregationDiffusion {
                init: if name == "ks2d_gauss" {
                    problems::keller_segel::KsInit::Gaussian
                } else {
                    problems::keller_segel::KsInit::Mixture
                },
                space: SpaceTime {
                    t0: 0.0,
                    horizon: 0.2,
                    dt: 0.01,
                    window: 4.0,
                },
                n_cloud: 500,
                sharing: problems::keller_segel::CloudSharing::Shared,
            },
            model: mlp(vec![64, 64, 64], Activation::Relu),
            training: training(
                8000,
                2000,
                LossKind::Sq,
                SetPolicy::Uniform { n1: 2000 },
                gentle(),
                0.02,
            ),
            diagnostics: DiagnosticsConfig {
                cadence: 10,
                metrics: vec![MetricKind::SecondMomentSlope],
                ..DiagnosticsConfig::default()
            },
            workers: None,
            output_dir: None,
        },
        "cw1d" => RunConfig {
            problem: ProblemConfig::DoubleWell {
                space: SpaceTime {
                    t0: 0.0,
                    horizon: 10.0,
                    dt: 0.01,
                    window: 3.0,
                },
                beta: 1.0,
                coupling: -0.1,
            },
            model: mlp(vec![64, 64], Activation::Relu),
            training: training(
                5000,
                1000,
                LossKind::Sq,
                SetPolicy::Uniform { n1: 1000 },
                halving(),
                0.01,
            ),
            diagnostics: DiagnosticsConfig {
                cadence: 0,
                metrics: Vec::new(),
                ..DiagnosticsConfig::default()
            },
            workers: None,
            output_dir: None,
        },
        "fpme1d" => RunConfig {
            problem: ProblemConfig::HeavyTailedPorousMedium {
                space: SpaceTime {
                    t0: 0.0,
                    horizon: 0.5,
                    dt: 0.01,
                    window: 3.0,
                },
                m: 2.0,
                alpha: 1.0,
            },
            model: mlp(vec![64, 64], Activation::Relu),
            training: training(
                5000,
                2000,
                LossKind::Sq,
                SetPolicy::Uniform { n1: 2000 },
                halving(),
                0.01,
            ),
            diagnostics: DiagnosticsConfig {
                cadence: 0,
                metrics: Vec::new(),
                ..DiagnosticsConfig::default()
            },
            workers: None,
            output_dir: None,
        },
        other => {
            return Err(Error::config(
                "preset",
                format!(
                    "unknown preset `{other}`; available: {}",
                    PRESET_NAMES.join(", ")
                ),
            ));
        }
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flagship_presets_carry_the_documented_parameters() {
        let cfg = preset("pme1d").unwrap();
        assert_eq!(cfg.training.particles, 1000);
        assert_eq!(cfg.training.policy, SetPolicy::Uniform { n1: 1000 });
        let s = cfg.problem.space();
        assert_eq!((s.t0, s.horizon, s.dt, s.window), (1.0, 1.0, 0.01, 2.0));
        assert_eq!(cfg.training.mollifier.eps, 0.01);
        let sch = cfg.training.schedule;
        assert_eq!((sch.alpha0, sch.gamma, sch.big_gamma), (0.001, 0.5, 500));

        let cfg = preset("ks2d_gauss").unwrap();
        match cfg.problem {
            ProblemConfig::AggregationDiffusion { n_cloud, space, .. } => {
                assert_eq!(n_cloud, 500);
                assert_eq!((space.horizon, space.dt, space.window), (0.2, 0.01, 4.0));
            }
            ref p => panic!("wrong problem kind: {p:?}"),
        }
        assert_eq!(cfg.training.particles, 2000);
        assert_eq!(cfg.training.schedule.gamma, 0.7);
        assert_eq!(cfg.training.schedule.big_gamma, 500);
    }

    #[test]
    fn every_preset_validates_builds_and_round_trips() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = dump(&cfg);
            let back = from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(back, cfg, "round trip changed `{name}`");
            let again = from_json(&dump(&back)).unwrap();
            assert_eq!(again, back, "dump is not a fixed point for `{name}`");

            let problem = cfg
                .problem
                .build(cfg.training.particles)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(problem.dim(), cfg.problem.dim());
            let model = cfg
                .model
                .build(problem.domain.clone(), &problem.grid)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(model.dim(), problem.dim());
            let run = cfg.train_run().unwrap();
            assert_eq!(run.moll.dim, problem.dim());
            assert_eq!(run.n_particles, cfg.training.particles);
        }
    }

    #[test]
    fn preset_reference_by_name_resolves_and_rejects_unknowns() {
        let cfg = from_json(r#"{"preset": "pme1d"}"#).unwrap();
        assert_eq!(cfg, preset("pme1d").unwrap());
        let err = from_json(r#"{"preset": "pme9d"}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("pme9d"), "{err}");
    }

    #[test]
    fn preset_with_block_override_replaces_that_block_only() {
        let text = r#"{
            "preset": "pme1d",
            "training": {
                "epochs": 50,
                "particles": 200,
                "policy": {"mode": "uniform", "n1": 100}
            }
        }"#;
        let cfg = from_json(text).unwrap();
        assert_eq!(cfg.training.epochs, 50);
        assert_eq!(cfg.training.particles, 200);
        // Unspecified training fields take schema defaults, not preset values.
        assert_eq!(cfg.training.mollifier.eps, 0.01);
        assert_eq!(cfg.training.seed, 0);
        // Other blocks come from the preset untouched.
        assert_eq!(cfg.problem, preset("pme1d").unwrap().problem);
        assert_eq!(cfg.model, preset("pme1d").unwrap().model);
    }

    #[test]
    fn empty_and_malformed_documents_are_rejected_with_paths() {
        let err = from_json("{}").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("problem"), "{err}");

        let err = from_json(r#"{"preset": "pme1d", "trainings": {}}"#).unwrap_err();
        assert!(err.to_string().contains("trainings"), "{err}");

        let bad_field = r#"{
            "preset": "pme1d",
            "problem": {"kind": "porous_medium", "dim": 1,
                        "space": {"t0": 1.0, "horizon": 1.0, "dt": 0.01, "window": 2.0},
                        "odd": true}
        }"#;
        let err = from_json(bad_field).unwrap_err();
        assert!(err.to_string().contains("odd") || err.to_string().contains("problem"), "{err}");
    }

    #[test]
    fn validation_catches_schedule_policy_and_capability_errors() {
        let mut cfg = preset("pme1d").unwrap();
        cfg.training.mollifier.eps = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = preset("pme1d").unwrap();
        cfg.training.schedule.gamma = 1.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("gamma"));

        let mut cfg = preset("pme3d").unwrap();
        cfg.training.particles = 1000; // below the jittered subset size 2000
        assert!(cfg.validate().is_err());

        let mut cfg = preset("pme1d").unwrap();
        cfg.training.loss = LossKind::Path; // mlp has no exact density
        assert!(cfg.validate().is_err());

        let mut cfg = preset("pme1d").unwrap();
        cfg.model = ModelConfig::Fourier { modes_per_axis: 8 };
        cfg.validate().unwrap();
        cfg.training.schedule.alpha0 = 0.9;
        assert!(cfg.validate().is_err());

        let mut cfg = preset("cw1d").unwrap();
        cfg.diagnostics.metrics = vec![MetricKind::RelativeL2];
        assert!(cfg.validate().is_err(), "no exact reference for this problem");

        let mut cfg = preset("pme1d").unwrap();
        cfg.training.loss = LossKind::Kl;
        cfg.training.policy = SetPolicy::ModelImportance {
            n: 500,
            from_mollified: false,
        };
        assert!(cfg.validate().is_err(), "mlp cannot direct-sample");
        cfg.training.policy = SetPolicy::ModelImportance {
            n: 500,
            from_mollified: true,
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn grid_construction_rejects_non_dividing_steps() {
        let st = SpaceTime {
            t0: 0.0,
            horizon: 1.0,
            dt: 0.3,
            window: 1.0,
        };
        assert!(st.grid().is_err());
        let st = SpaceTime {
            t0: 0.0,
            horizon: 1.0,
            dt: 0.01,
            window: 1.0,
        };
        assert_eq!(st.grid().unwrap().steps(), 100);
    }

    #[test]
    fn overrides_update_scale_fields_and_revalidate() {
        let mut cfg = preset("pme1d").unwrap();
        cfg.apply(&Overrides {
            seed: Some(7),
            epochs: Some(50),
            particles: Some(300),
            workers: Some(2),
            out: Some("runs/demo".into()),
        })
        .unwrap();
        assert_eq!(cfg.training.seed, 7);
        assert_eq!(cfg.training.epochs, 50);
        assert_eq!(cfg.training.particles, 300);
        assert_eq!(cfg.workers, Some(2));
        assert_eq!(cfg.output_dir.as_deref(), Some("runs/demo"));

        let mut cfg = preset("pme3d").unwrap();
        let err = cfg
            .apply(&Overrides {
                particles: Some(100),
                ..Overrides::default()
            })
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn load_config_reads_files_and_reports_missing_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, dump(&preset("fpme1d").unwrap())).unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg, preset("fpme1d").unwrap());
        assert!(load_config(&dir.path().join("missing.json")).is_err());
    }
}
