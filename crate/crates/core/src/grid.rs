use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `t0 = node(0) < ... < node(M) = t0 + horizon`.
///
/// `t0` is physical time (reference solutions are evaluated at `node(m)`);
/// density models always receive *elapsed* time `m * dt`, so a model's time
/// input starts at 0 regardless of where the problem starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !t0.is_finite() || !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs finite t0 and horizon > 0, got t0={t0}, horizon={horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter("time grid needs steps >= 1".into()));
        }
        Ok(TimeGrid {
            t0,
            horizon,
            steps,
        })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps M; the grid has M+1 nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Physical time of node `m`, computed directly (not accumulated) so that
    /// node(m) == t0 + m*dt exactly in floating point.
    pub fn node(&self, m: usize) -> f64 {
        debug_assert!(m <= self.steps);
        self.t0 + m as f64 * self.dt()
    }

    /// Elapsed model time of node `m`.
    pub fn elapsed(&self, m: usize) -> f64 {
        m as f64 * self.dt()
    }

    /// Nearest node index for an elapsed time in `[0, horizon]`.
    pub fn nearest_node(&self, elapsed: f64) -> usize {
        let m = (elapsed / self.dt()).round();
        (m.max(0.0) as usize).min(self.steps)
    }
}
