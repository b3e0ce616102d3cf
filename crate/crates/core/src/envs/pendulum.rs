use rand::Rng as _;

use super::{checked_action, EnvSpec, EnvState, Environment, StepOutcome};
use crate::error::Result;
use crate::rng::seeded;

const GRAVITY: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
const FALL_ANGLE: f64 = 0.8;
const INIT_RANGE: f64 = 0.1;
/// Semi-implicit Euler substeps per control interval.
const SUBSTEPS: usize = 20;

/// Balance an inverted rod (angle measured from upright) with a bounded
/// torque.
///
/// Dynamics: `theta'' = (3g / 2l) sin(theta) + (3 / m l^2) u`, `u in [-2, 2]`.
/// Observation `(cos theta, sin theta, theta')`. Reward is `+1` for every step
/// that ends with `|theta| < 0.8`; leaving that range ends the episode with
/// reward 0. Episodes are capped at 1000 steps.
#[derive(Debug, Clone)]
pub struct PendulumBalance {
    spec: EnvSpec,
}

impl Default for PendulumBalance {
    fn default() -> Self {
        Self::new()
    }
}

impl PendulumBalance {
    pub const NAME: &'static str = "pendulum-balance";

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: Self::NAME.to_string(),
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-2.0],
                action_high: vec![2.0],
                max_episode_steps: 1000,
                dt: 0.05,
            },
        }
    }

    pub fn observe(theta: f64, omega: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin(), omega]
    }

    /// Integrates one control interval from `(theta, omega)` under `torque`.
    pub fn integrate(&self, theta: f64, omega: f64, torque: f64) -> (f64, f64) {
        let h = self.spec.dt / SUBSTEPS as f64;
        let (mut th, mut w) = (theta, omega);
        for _ in 0..SUBSTEPS {
            let acc = 1.5 * GRAVITY / LENGTH * th.sin() + 3.0 / (MASS * LENGTH * LENGTH) * torque;
            w += acc * h;
            th += w * h;
        }
        (th, w)
    }

    /// Total mechanical energy of the uniform rod, potential measured from the pivot.
    pub fn energy(theta: f64, omega: f64) -> f64 {
        let inertia = MASS * LENGTH * LENGTH / 3.0;
        0.5 * inertia * omega * omega + MASS * GRAVITY * 0.5 * LENGTH * theta.cos()
    }

    pub fn state_from(theta: f64, omega: f64) -> EnvState {
        EnvState {
            observation: Self::observe(theta, omega),
            physics: vec![theta, omega],
            steps: 0,
        }
    }
}

impl Environment for PendulumBalance {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> EnvState {
        let mut rng = seeded(seed);
        let theta = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        let omega = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        Self::state_from(theta, omega)
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        let action = checked_action(&self.spec, action)?;
        let (theta, omega) = self.integrate(state.physics[0], state.physics[1], action[0]);
        let steps = state.steps + 1;
        let upright = theta.abs() < FALL_ANGLE;
        Ok(StepOutcome {
            state: EnvState {
                observation: Self::observe(theta, omega),
                physics: vec![theta, omega],
                steps,
            },
            reward: if upright { 1.0 } else { 0.0 },
            terminated: !upright,
            truncated: upright && steps >= self.spec.max_episode_steps,
        })
    }
}
