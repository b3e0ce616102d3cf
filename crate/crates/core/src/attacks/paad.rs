//! Simplified PA-AD: a PPO-trained adversary that maps the victim's state to
//! a bounded perturbation direction `d ∈ [-1, 1]^n`, giving `s~ = s + ε·d`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Adam, AdamConfig, Checkpoint, Mlp, MlpGrads, Tape, Tensor};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_tagged, seeded};
use crate::sac::{SacAgent, HALF_LOG_2PI};
use crate::transforms::Phase;

use rand::seq::SliceRandom;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub total_steps: usize,
    pub rollout: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    pub hidden: usize,
    pub init_log_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            rollout: 2048,
            epochs: 10,
            minibatch: 256,
            clip: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            lr: 3e-4,
            hidden: 64,
            init_log_std: -0.5,
        }
    }
}

/// Adversary policy: a tanh-headed mean direction, a state-independent
/// exploration log-std and a value head.
#[derive(Debug, Clone, PartialEq)]
pub struct PaadAdversary {
    pub actor: Mlp,
    pub value: Mlp,
    pub log_std: Vec<f64>,
}

/// PPO clipped surrogate for one sample: `min(r·A, clip(r, 1-c, 1+c)·A)`.
pub fn ppo_clip_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Negated mean clipped surrogate of a minibatch, with its gradient for the
/// actor and the log-std vector. `raw` holds the sampled pre-clip directions,
/// `old_logp` and `advantages` are column vectors.
pub fn ppo_loss_and_grad(
    adv: &PaadAdversary,
    states: &Tensor,
    raw: &Tensor,
    old_logp: &Tensor,
    advantages: &Tensor,
    clip: f64,
) -> Result<(f64, MlpGrads, Vec<f64>)> {
    let tape = Tape::new();
    let (mean, avars) = adv.actor.forward(tape.constant(states.clone()))?;
    let ls = tape.var(Tensor::row(&adv.log_std));
    let z = (tape.constant(raw.clone()) - mean) * (-ls).exp();
    let logp = (z.square().scale(-0.5) - ls).add_scalar(-HALF_LOG_2PI).sum_cols();
    let ratio = (logp - tape.constant(old_logp.clone())).exp();
    let av = tape.constant(advantages.clone());
    let surr = (ratio * av).min(ratio.clamp(1.0 - clip, 1.0 + clip) * av);
    let loss = -surr.mean();
    let g = tape.backward(loss)?;
    Ok((loss.item(), avars.grads(&g), g.wrt(ls).into_data()))
}

/// Generalized advantage estimates and returns. `bootstrap[t]` is the value
/// used for the state after step `t` (zero after a genuine terminal), and
/// `ends[t]` marks the last step of an episode segment.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: &[f64], ends: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        if ends[t] {
            acc = 0.0;
        }
        let delta = rewards[t] + gamma * bootstrap[t] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

impl PaadAdversary {
    pub fn new(state_dim: usize, cfg: &PpoConfig, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut actor = Mlp::new(
            &[state_dim, cfg.hidden, cfg.hidden, state_dim],
            Activation::Tanh,
            Activation::Tanh,
            &mut rng,
        );
        actor.scale_output_layer(0.01);
        let value = Mlp::new(
            &[state_dim, cfg.hidden, cfg.hidden, 1],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        Self {
            actor,
            value,
            log_std: vec![cfg.init_log_std; state_dim],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.actor.in_dim()
    }

    /// Deterministic direction, one row per state.
    pub fn direction(&self, states: &Tensor) -> Result<Tensor> {
        self.actor.predict(states)
    }

    pub fn attack(&self, states: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.direction(states)?;
        let mut out = states.clone();
        for (v, di) in out.data_mut().iter_mut().zip(d.data()) {
            *v += eps * di.clamp(-1.0, 1.0);
        }
        Ok(out)
    }

    fn log_prob(&self, mean: &[f64], u: &[f64]) -> f64 {
        mean.iter()
            .zip(u)
            .zip(&self.log_std)
            .map(|((m, x), ls)| {
                let z = (x - m) / ls.exp();
                -0.5 * z * z - ls - HALF_LOG_2PI
            })
            .sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new()
            .with_network("actor", &self.actor)
            .with_network("value", &self.value);
        for (i, ls) in self.log_std.iter().enumerate() {
            ck = ck.with_scalar(&format!("log_std.{i}"), *ls);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let actor = ck.network("actor")?.clone();
        let log_std = (0..actor.out_dim())
            .map(|i| ck.scalar(&format!("log_std.{i}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            actor,
            value: ck.network("value")?.clone(),
            log_std,
        })
    }
}

struct Rollout {
    states: Vec<f64>,
    raw: Vec<f64>,
    logp: Vec<f64>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    bootstrap: Vec<f64>,
    ends: Vec<bool>,
}

/// Trains the adversary against a frozen victim. The victim acts through its
/// test-time transform when `through_transform` is set (white-box),
/// otherwise through its raw policy (gray-box). The adversary is rewarded
/// with the negative victim reward.
pub fn paad_train(
    victim: &SacAgent,
    env: &dyn Environment,
    eps: f64,
    through_transform: bool,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<PaadAdversary> {
    let spec = env.spec();
    let sd = spec.state_dim;
    let mut adv = PaadAdversary::new(sd, cfg, derive_tagged(seed, "paad-init"));
    let victim_act = |obs: &[f64]| -> Result<Vec<f64>> {
        if through_transform {
            victim.act(obs, Phase::Test)
        } else {
            Ok(victim.policy.deterministic(&Tensor::row(obs))?.into_data())
        }
    };
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut actor_opt = Adam::for_mlp(adam, &adv.actor);
    let mut value_opt = Adam::for_mlp(adam, &adv.value);
    let mut std_opt = Adam::new(adam, sd);
    let mut rng = seeded(derive_tagged(seed, "paad-rollout"));
    let env_seed = derive_tagged(seed, "paad-env");
    let mut episode = 0;
    let mut state = env.reset(derive_seed(env_seed, episode));
    let mut done_steps = 0;

    while done_steps < cfg.total_steps {
        let n = cfg.rollout.min(cfg.total_steps - done_steps).max(1);
        let mut ro = Rollout {
            states: Vec::with_capacity(n * sd),
            raw: Vec::with_capacity(n * sd),
            logp: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            bootstrap: Vec::with_capacity(n),
            ends: Vec::with_capacity(n),
        };
        for t in 0..n {
            let obs = Tensor::row(&state.observation);
            let mean = adv.actor.predict(&obs)?.into_data();
            let u: Vec<f64> = mean
                .iter()
                .zip(&adv.log_std)
                .map(|(m, ls)| { let z: f64 = StandardNormal.sample(&mut rng); m + ls.exp() * z })
                .collect();
            let perturbed: Vec<f64> = state
                .observation
                .iter()
                .zip(&u)
                .map(|(s, x)| s + eps * x.clamp(-1.0, 1.0))
                .collect();
            let action = victim_act(&perturbed)?;
            let out = env.step(&state, &spec.scale_action(&action))?;
            ro.logp.push(adv.log_prob(&mean, &u));
            ro.values.push(adv.value.predict(&obs)?.item());
            ro.states.extend_from_slice(&state.observation);
            ro.raw.extend_from_slice(&u);
            ro.rewards.push(-out.reward);
            let last = t + 1 == n;
            if out.terminated {
                ro.bootstrap.push(0.0);
            } else if out.truncated || last {
                ro.bootstrap.push(adv.value.predict(&Tensor::row(&out.state.observation))?.item());
            } else {
                ro.bootstrap.push(f64::NAN); // filled below from the next value
            }
            ro.ends.push(out.done() || last);
            if out.done() {
                episode += 1;
                state = env.reset(derive_seed(env_seed, episode));
            } else {
                state = out.state;
            }
        }
        for t in 0..n {
            if ro.bootstrap[t].is_nan() {
                ro.bootstrap[t] = ro.values[t + 1];
            }
        }
        done_steps += n;
        let (advantages, returns) = gae(&ro.rewards, &ro.values, &ro.bootstrap, &ro.ends, cfg.gamma, cfg.gae_lambda);
        let mean_a = advantages.iter().sum::<f64>() / n as f64;
        let std_a = (advantages.iter().map(|a| (a - mean_a).powi(2)).sum::<f64>() / n as f64).sqrt() + 1e-8;
        let norm_adv: Vec<f64> = advantages.iter().map(|a| (a - mean_a) / std_a).collect();

        let states = Tensor::matrix(n, sd, ro.states);
        let raw = Tensor::matrix(n, sd, ro.raw);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch.max(1)) {
                let m = chunk.len();
                let s = states.gather_rows(chunk);
                let u = raw.gather_rows(chunk);
                let old = Tensor::matrix(m, 1, chunk.iter().map(|&i| ro.logp[i]).collect());
                let a = Tensor::matrix(m, 1, chunk.iter().map(|&i| norm_adv[i]).collect());
                let ret = Tensor::matrix(m, 1, chunk.iter().map(|&i| returns[i]).collect());

                let (loss, actor_grads, std_grad) = ppo_loss_and_grad(&adv, &s, &u, &old, &a, cfg.clip)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged("PPO surrogate is not finite".into()));
                }
                actor_opt.step_mlp(&mut adv.actor, &actor_grads)?;
                std_opt.update(&mut adv.log_std, &std_grad)?;
                for v in adv.log_std.iter_mut() {
                    *v = v.clamp(-5.0, 1.0);
                }

                let tape = Tape::new();
                let (v, vvars) = adv.value.forward(tape.constant(s))?;
                let vloss = (v - tape.constant(ret)).square().mean();
                let g = tape.backward(vloss)?;
                value_opt.step_mlp(&mut adv.value, &vvars.grads(&g))?;
            }
        }
        log::debug!(
            "paad: {done_steps} steps, mean adversary reward {:.4}",
            ro.rewards.iter().sum::<f64>() / n as f64
        );
    }
    Ok(adv)
}
