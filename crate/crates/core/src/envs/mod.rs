//! Native continuous-control environments.
//!
//! Environments are stateless descriptors: [`Environment::reset`] produces an
//! [`EnvState`] and [`Environment::step`] maps a state and action to the next
//! state. Dynamics are deterministic; randomness enters only through the
//! reset seed.

mod pendulum;
mod reacher;

pub use pendulum::PendulumBalance;
pub use reacher::PointReacher;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
    pub dt: f64,
}

impl EnvSpec {
    /// Maps a `[-1, 1]` action onto the environment bounds.
    pub fn scale_action(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| lo + (a.clamp(-1.0, 1.0) + 1.0) * 0.5 * (hi - lo))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    /// Environment-specific internal state (angles, positions, ...).
    pub physics: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    /// The episode ended in a genuine terminal state (e.g. a fall).
    pub terminated: bool,
    /// The episode hit the step limit.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    fn reset(&self, seed: u64) -> EnvState;

    /// Advances one control interval. Out-of-bounds actions are clamped;
    /// non-finite actions are rejected.
    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome>;
}

pub(crate) fn checked_action(spec: &EnvSpec, action: &[f64]) -> Result<Vec<f64>> {
    if action.len() != spec.action_dim {
        return Err(Error::Shape(format!(
            "{} expects {} action dims, got {}",
            spec.name,
            spec.action_dim,
            action.len()
        )));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Contract(format!("non-finite action {action:?}")));
    }
    Ok(action
        .iter()
        .zip(spec.action_low.iter().zip(&spec.action_high))
        .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
        .collect())
}

pub const ENV_NAMES: [&str; 2] = [PendulumBalance::NAME, PointReacher::NAME];

pub fn make_env(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        PendulumBalance::NAME => Ok(Box::new(PendulumBalance::new())),
        PointReacher::NAME => Ok(Box::new(PointReacher::new())),
        other => Err(Error::Config(format!(
            "unknown environment `{other}` (known: {})",
            ENV_NAMES.join(", ")
        ))),
    }
}
