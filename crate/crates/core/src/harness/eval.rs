//! Test-time rollouts: observe `s`, perturb to `s~ = Ψ(s)`, act on `π(T(s~))`.

use crate::attacks::Adversary;
use crate::diffcore::Tensor;
use crate::envs::{EnvState, Environment};
use crate::error::Result;
use crate::rng::{derive_seed, derive_tagged, seeded, Rng};
use crate::sac::SacAgent;
use crate::transforms::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Act with `tanh(mu)`; otherwise sample from the policy.
    pub deterministic: bool,
    /// Which side of the transform the policy sees.
    pub phase: Phase,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            deterministic: true,
            phase: Phase::Test,
        }
    }
}

/// Undiscounted return of each episode, indexed by episode. Episodes run in
/// lockstep as one batch, but every episode owns its reset seed and random
/// streams, so the result does not depend on how many run together.
pub fn evaluate(
    agent: &SacAgent,
    adversary: &dyn Adversary,
    env: &dyn Environment,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    evaluate_with(agent, adversary, env, episodes, seed, EvalOptions::default())
}

pub fn evaluate_with(
    agent: &SacAgent,
    adversary: &dyn Adversary,
    env: &dyn Environment,
    episodes: usize,
    seed: u64,
    opts: EvalOptions,
) -> Result<Vec<f64>> {
    rollouts(agent, adversary, env, episodes, seed, opts, None)
}

/// Like [`evaluate_with`], also returning every true state the episodes visited.
pub fn evaluate_traced(
    agent: &SacAgent,
    adversary: &dyn Adversary,
    env: &dyn Environment,
    episodes: usize,
    seed: u64,
    opts: EvalOptions,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut visited = Vec::new();
    let returns = rollouts(agent, adversary, env, episodes, seed, opts, Some(&mut visited))?;
    Ok((returns, visited))
}

fn rollouts(
    agent: &SacAgent,
    adversary: &dyn Adversary,
    env: &dyn Environment,
    episodes: usize,
    seed: u64,
    opts: EvalOptions,
    mut visited: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    let spec = env.spec();
    let reset_seed = derive_tagged(seed, "eval-reset");
    let attack_seed = derive_tagged(seed, "eval-attack");
    let action_seed = derive_tagged(seed, "eval-action");
    let mut states: Vec<EnvState> = (0..episodes)
        .map(|e| env.reset(derive_seed(reset_seed, e as u64)))
        .collect();
    let mut attack_rngs: Vec<Rng> = (0..episodes)
        .map(|e| seeded(derive_seed(attack_seed, e as u64)))
        .collect();
    let mut action_rngs: Vec<Rng> = (0..episodes)
        .map(|e| seeded(derive_seed(action_seed, e as u64)))
        .collect();
    let mut returns = vec![0.0; episodes];
    let mut active: Vec<usize> = (0..episodes).collect();

    while !active.is_empty() {
        let obs: Vec<&[f64]> = active.iter().map(|&e| states[e].observation.as_slice()).collect();
        if let Some(v) = visited.as_deref_mut() {
            v.extend(obs.iter().map(|o| o.to_vec()));
        }
        let obs = Tensor::from_rows(&obs);
        let mut rngs: Vec<Rng> = active.iter().map(|&e| attack_rngs[e].clone()).collect();
        let perturbed = adversary.perturb_batch(&obs, &mut rngs)?;
        for (&e, rng) in active.iter().zip(rngs) {
            attack_rngs[e] = rng;
        }
        let actions = if opts.deterministic {
            agent.act_batch(&perturbed, opts.phase)?
        } else {
            let x = agent.transform.dispatch_batch(&perturbed, opts.phase);
            let rows: Vec<Vec<f64>> = active
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    let (a, _) = agent
                        .policy
                        .sample(&Tensor::row(x.row_slice(i)), &mut action_rngs[e])?;
                    Ok(a.into_data())
                })
                .collect::<Result<_>>()?;
            Tensor::from_rows(&rows)
        };
        let mut still = Vec::with_capacity(active.len());
        for (i, &e) in active.iter().enumerate() {
            let out = env.step(&states[e], &spec.scale_action(actions.row_slice(i)))?;
            returns[e] += out.reward;
            let done = out.done();
            states[e] = out.state;
            if !done {
                still.push(e);
            }
        }
        active = still;
    }
    Ok(returns)
}

/// Mean and (population) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
