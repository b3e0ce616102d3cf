use rand::Rng as _;

use super::{checked_action, EnvSpec, EnvState, Environment, StepOutcome};
use crate::error::Result;
use crate::rng::seeded;

const ACCEL: f64 = 4.0;
const DAMPING: f64 = 1.0;
const BOX: f64 = 1.0;

/// Drive a point mass to a goal inside the box `[-1, 1]^2`.
///
/// Observation `(x, y, goal_x, goal_y, vx, vy)`, action is a force in
/// `[-1, 1]^2`, reward is `-||pos - goal||_2` after the step. Episodes last 50
/// steps and never terminate early.
#[derive(Debug, Clone)]
pub struct PointReacher {
    spec: EnvSpec,
}

impl Default for PointReacher {
    fn default() -> Self {
        Self::new()
    }
}

impl PointReacher {
    pub const NAME: &'static str = "point-reacher";

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: Self::NAME.to_string(),
                state_dim: 6,
                action_dim: 2,
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                max_episode_steps: 50,
                dt: 0.05,
            },
        }
    }

    /// `physics = [x, y, vx, vy, goal_x, goal_y]`.
    pub fn state_from(pos: [f64; 2], vel: [f64; 2], goal: [f64; 2]) -> EnvState {
        EnvState {
            observation: vec![pos[0], pos[1], goal[0], goal[1], vel[0], vel[1]],
            physics: vec![pos[0], pos[1], vel[0], vel[1], goal[0], goal[1]],
            steps: 0,
        }
    }
}

impl Environment for PointReacher {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> EnvState {
        let mut rng = seeded(seed);
        let mut coord = || rng.gen_range(-BOX..=BOX);
        let pos = [coord(), coord()];
        let goal = [coord(), coord()];
        Self::state_from(pos, [0.0, 0.0], goal)
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        let force = checked_action(&self.spec, action)?;
        let dt = self.spec.dt;
        let p = &state.physics;
        let (mut pos, mut vel) = ([p[0], p[1]], [p[2], p[3]]);
        let goal = [p[4], p[5]];
        for d in 0..2 {
            vel[d] += (ACCEL * force[d] - DAMPING * vel[d]) * dt;
            pos[d] += vel[d] * dt;
            if pos[d].abs() > BOX {
                pos[d] = pos[d].clamp(-BOX, BOX);
                vel[d] = 0.0;
            }
        }
        let dist = ((pos[0] - goal[0]).powi(2) + (pos[1] - goal[1]).powi(2)).sqrt();
        let mut next = Self::state_from(pos, vel, goal);
        next.steps = state.steps + 1;
        let truncated = next.steps >= self.spec.max_episode_steps;
        Ok(StepOutcome {
            state: next,
            reward: -dist,
            terminated: false,
            truncated,
        })
    }
}
