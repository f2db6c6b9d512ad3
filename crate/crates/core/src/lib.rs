//! Particle-based solver for mean-field SDEs / nonlinear Fokker-Planck equations.
//!
//! The core loop: simulate a batch of interacting particles through an
//! Euler-Maruyama scheme whose drift/diffusion read a *frozen* parametric
//! density model, mollify the batch into an empirical density, then move the
//! model one optimizer step (or one closed-form projection step) toward that
//! empirical density. Repeated over epochs this converges to the mean-field
//! law.
//!
//! Layering, bottom up: `grid`/`noise`/`sde` (simulation), `measure`
//! (mollified empirical measures), `density` (density models and
//! rectification), `train` (losses, schedules, the epoch loop, baselines),
//! `problems` (benchmark dynamics), `diag` (error metrics), `config` +
//! `runner` (run orchestration and artifacts).

pub mod config;
pub mod density;
pub mod diag;
pub mod domain;
pub mod error;
pub mod fdcheck;
pub mod grid;
pub mod measure;
pub mod noise;
pub mod nn;
pub mod problems;
pub mod quad;
pub mod runner;
pub mod sde;
pub mod train;

pub use domain::Domain;
pub use error::{Error, Result};
pub use grid::TimeGrid;
