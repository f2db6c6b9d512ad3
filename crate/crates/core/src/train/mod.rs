//! Training layer: losses over mollified particle batches, the optimizer,
//! learning-rate schedules, training-set policies, the per-epoch update loop,
//! and the classical particle baselines used as references and oracles.

pub mod adam;
pub mod baselines;
pub mod loss;
pub mod sets;
mod trainer;

pub use trainer::{AdaSchedule, EpochReport, TrainRun, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stepwise-geometric learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Initial rate.
    pub alpha0: f64,
    /// Contraction factor applied every `big_gamma` epochs.
    pub gamma: f64,
    /// Window length in epochs.
    pub big_gamma: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            alpha0: 0.001,
            gamma: 0.5,
            big_gamma: 500,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0) || !(self.gamma > 0.0 && self.gamma <= 1.0) || self.big_gamma == 0
        {
            return Err(Error::InvalidParameter(format!(
                "schedule needs alpha0 > 0, gamma in (0,1], window >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Rate at (0-based) epoch n: alpha0 * gamma^floor(n / big_gamma).
pub fn schedule_rate(s: Schedule, n: usize) -> f64 {
    s.alpha0 * s.gamma.powi((n as u32 / s.big_gamma) as i32)
}

/// How the per-epoch update rate is produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateRule {
    /// The stepwise-geometric schedule (the default).
    Geometric(Schedule),
    /// 1/(2(n+1)) at epoch n: makes the closed-form basis update average all
    /// batches with equal weight (used by equivalence oracles).
    Harmonic,
}

impl RateRule {
    pub fn rate(&self, epoch: usize) -> f64 {
        match self {
            RateRule::Geometric(s) => schedule_rate(*s, epoch),
            RateRule::Harmonic => 0.5 / (epoch as f64 + 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RateRule::Geometric(s) => s.validate(),
            RateRule::Harmonic => Ok(()),
        }
    }
}

/// Loss choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared L2 distance between model output and the mollified batch.
    Sq,
    /// Cross-entropy part of KL(mollified batch || model).
    Kl,
    /// Negative log-likelihood of the raw particle paths.
    Path,
}

/// Training-point policies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SetPolicy {
    /// One uniform draw on the window, shared by every time node.
    Uniform { n1: usize },
    /// Uniform points plus jittered copies of last epoch's particles
    /// (per node). Falls back to uniform-only in the first epoch.
    AdaptiveUnion { n1: usize, n2: usize, sigma_noise: f64 },
    /// Points drawn from the current model per node (importance sampling;
    /// `from_mollified` instead draws from the mollified batch itself, at
    /// accept-reject cost).
    ModelImportance { n: usize, from_mollified: bool },
    /// The simulated batch positions themselves.
    ParticlePaths,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_rate_matches_the_stated_values() {
        let s = Schedule::default();
        assert_eq!(schedule_rate(s, 0), 0.001);
        assert_eq!(schedule_rate(s, 499), 0.001);
        assert_eq!(schedule_rate(s, 500), 0.0005);
        assert_eq!(schedule_rate(s, 999), 0.0005);
        assert_eq!(schedule_rate(s, 1000), 0.00025);
    }

    #[test]
    fn schedule_is_nonincreasing_and_constant_within_windows() {
        let s = Schedule {
            alpha0: 0.01,
            gamma: 0.3,
            big_gamma: 7,
        };
        let mut prev = f64::INFINITY;
        for n in 0..100 {
            let r = schedule_rate(s, n);
            assert!(r <= prev);
            assert_eq!(r, schedule_rate(s, (n / 7) * 7), "window-constant at {n}");
            prev = r;
        }
    }

    #[test]
    fn harmonic_rule_gives_half_then_quarter() {
        assert_eq!(RateRule::Harmonic.rate(0), 0.5);
        assert_eq!(RateRule::Harmonic.rate(1), 0.25);
        assert_eq!(RateRule::Harmonic.rate(9), 0.05);
    }

    #[test]
    fn schedule_validation_rejects_bad_fields() {
        assert!(Schedule {
            alpha0: 0.0,
            ..Schedule::default()
        }
        .validate()
        .is_err());
        assert!(Schedule {
            gamma: 1.5,
            ..Schedule::default()
        }
        .validate()
        .is_err());
        assert!(Schedule {
            big_gamma: 0,
            ..Schedule::default()
        }
        .validate()
        .is_err());
        assert!(Schedule::default().validate().is_ok());
    }
}
