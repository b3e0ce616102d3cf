//! Simplified robust Sarsa: an on-policy critic for a frozen victim, fitted
//! with a TD loss plus a local-smoothness penalty, later attacked like Min Q.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Adam, AdamConfig, Mlp, MlpGrads, Tape, Tensor};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_tagged, seeded};
use crate::sac::{hcat, SacAgent};
use crate::transforms::Phase;

use super::pgd::{pgd_maximize_batch, PgdParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsConfig {
    /// Victim transitions collected before fitting.
    pub collect_steps: usize,
    /// Gradient steps.
    pub train_steps: usize,
    /// Weight of the smoothness penalty; 0 gives plain Sarsa.
    pub lambda: f64,
    /// Radius of the smoothness ball; defaults to the attack ε.
    pub delta: Option<f64>,
    pub inner_steps: usize,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub tau: f64,
}

impl Default for RsConfig {
    fn default() -> Self {
        Self {
            collect_steps: 10_000,
            train_steps: 5_000,
            lambda: 0.1,
            delta: None,
            inner_steps: 3,
            gamma: 0.99,
            lr: 1e-3,
            batch_size: 128,
            hidden: 64,
            tau: 0.01,
        }
    }
}

/// On-policy transitions `(s, a, r, s', a', done)` of a fixed policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SarsaData {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    pub next_actions: Tensor,
    pub dones: Tensor,
}

impl SarsaData {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, idx: &[usize]) -> SarsaData {
        SarsaData {
            states: self.states.gather_rows(idx),
            actions: self.actions.gather_rows(idx),
            rewards: self.rewards.gather_rows(idx),
            next_states: self.next_states.gather_rows(idx),
            next_actions: self.next_actions.gather_rows(idx),
            dones: self.dones.gather_rows(idx),
        }
    }
}

/// A fitted robust critic and the radius it was regularized over.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustCritic {
    pub net: Mlp,
    pub delta: f64,
    pub lambda: f64,
}

/// Rolls out the victim exactly as it acts at test time (deterministic, with
/// its transform) and records Sarsa tuples.
pub fn rs_collect(agent: &SacAgent, env: &dyn Environment, steps: usize, seed: u64) -> Result<SarsaData> {
    let spec = env.spec();
    let (sd, ad) = (spec.state_dim, spec.action_dim);
    let mut cols: [Vec<f64>; 6] = Default::default();
    let mut episode = 0;
    let mut state = env.reset(derive_seed(seed, episode));
    let mut action = agent.act(&state.observation, Phase::Test)?;
    for _ in 0..steps {
        let out = env.step(&state, &spec.scale_action(&action))?;
        let next_action = agent.act(&out.state.observation, Phase::Test)?;
        cols[0].extend_from_slice(&state.observation);
        cols[1].extend_from_slice(&action);
        cols[2].push(out.reward);
        cols[3].extend_from_slice(&out.state.observation);
        cols[4].extend_from_slice(&next_action);
        cols[5].push(if out.terminated { 1.0 } else { 0.0 });
        if out.done() {
            episode += 1;
            state = env.reset(derive_seed(seed, episode));
            action = agent.act(&state.observation, Phase::Test)?;
        } else {
            state = out.state;
            action = next_action;
        }
    }
    let [s, a, r, s2, a2, d] = cols;
    Ok(SarsaData {
        states: Tensor::matrix(steps, sd, s),
        actions: Tensor::matrix(steps, ad, a),
        rewards: Tensor::matrix(steps, 1, r),
        next_states: Tensor::matrix(steps, sd, s2),
        next_actions: Tensor::matrix(steps, ad, a2),
        dones: Tensor::matrix(steps, 1, d),
    })
}

/// For each row, the state in the δ-ball maximizing `(Q(s~, a) - Q(s, a))²`
/// (found by a few PGD steps) and that maximal squared gap.
pub fn worst_smoothness(
    net: &Mlp,
    states: &Tensor,
    actions: &Tensor,
    delta: f64,
    inner_steps: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let base = net.predict(&hcat(states, actions))?;
    let gap = |x: &Tensor| -> Result<(Vec<f64>, Tensor)> {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let q = net.forward_frozen(xv.concat_cols(tape.constant(actions.clone())))?;
        let sq = (q - tape.constant(base.clone())).square();
        let g = tape.backward(sq.sum())?;
        Ok((sq.value().into_data(), g.wrt(xv)))
    };
    if delta <= 0.0 || inner_steps == 0 {
        return Ok((states.clone(), vec![0.0; states.rows()]));
    }
    // start from a corner-free random-ish point: the gap has zero gradient at s
    let start = Tensor::matrix(
        states.rows(),
        states.cols(),
        (0..states.len()).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect(),
    );
    let params = PgdParams::new(delta, 1.0 / inner_steps as f64, inner_steps)?;
    let worst = pgd_maximize_batch(gap, states, params, Some(start))?;
    let (vals, _) = gap(&worst)?;
    Ok((worst, vals))
}

/// Mean of the worst-case squared gap over the δ-balls of `states`.
pub fn smoothness_penalty(net: &Mlp, states: &Tensor, actions: &Tensor, delta: f64, inner_steps: usize) -> Result<f64> {
    let (_, vals) = worst_smoothness(net, states, actions, delta, inner_steps)?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Loss and parameter gradient of one robust-Sarsa minibatch, given the
/// bootstrap targets and the adversarial states.
pub fn rs_loss_and_grad(
    net: &Mlp,
    batch: &SarsaData,
    y: &Tensor,
    worst: &Tensor,
    lambda: f64,
) -> Result<(f64, MlpGrads)> {
    let tape = Tape::new();
    let a = tape.constant(batch.actions.clone());
    let (q, vars) = net.forward(tape.constant(batch.states.clone()).concat_cols(a))?;
    let td = (q - tape.constant(y.clone())).square().mean();
    if lambda == 0.0 {
        let g = tape.backward(td)?;
        return Ok((td.item(), vars.grads(&g)));
    }
    let (qw, vars_w) = net.forward(tape.constant(worst.clone()).concat_cols(a))?;
    let loss = td + (qw - q).square().mean().scale(lambda);
    let g = tape.backward(loss)?;
    let mut grads = vars.grads(&g);
    grads.accumulate(&vars_w.grads(&g));
    Ok((loss.item(), grads))
}

/// Fits `net` to the data with Sarsa targets from a slowly moving copy.
pub fn rs_fit(data: &SarsaData, mut net: Mlp, cfg: &RsConfig, delta: f64, seed: u64) -> Result<Mlp> {
    if data.is_empty() {
        return Err(Error::Contract("robust Sarsa needs transitions".into()));
    }
    let mut target = net.clone();
    let mut opt = Adam::for_mlp(AdamConfig::with_lr(cfg.lr), &net);
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_size.min(data.len()).max(1);
    for step in 0..cfg.train_steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = data.gather(&order[cursor..cursor + bs]);
        cursor += bs;
        let q_next = target.predict(&hcat(&batch.next_states, &batch.next_actions))?;
        let y: Vec<f64> = (0..bs)
            .map(|i| {
                batch.rewards.data()[i] + cfg.gamma * (1.0 - batch.dones.data()[i]) * q_next.data()[i]
            })
            .collect();
        let y = Tensor::matrix(bs, 1, y);
        let worst = if cfg.lambda > 0.0 {
            worst_smoothness(&net, &batch.states, &batch.actions, delta, cfg.inner_steps)?.0
        } else {
            batch.states.clone()
        };
        let (loss, grads) = rs_loss_and_grad(&net, &batch, &y, &worst, cfg.lambda)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("robust Sarsa loss {loss} at step {step}")));
        }
        opt.step_mlp(&mut net, &grads)?;
        target.ema_from(&net, cfg.tau);
    }
    Ok(net)
}

/// Collects victim rollouts and fits a robust critic for them.
pub fn rs_train(
    agent: &SacAgent,
    env: &dyn Environment,
    cfg: &RsConfig,
    eps: f64,
    seed: u64,
) -> Result<RobustCritic> {
    let data = rs_collect(agent, env, cfg.collect_steps, derive_tagged(seed, "rs-collect"))?;
    let spec = env.spec();
    let mut rng = seeded(derive_tagged(seed, "rs-init"));
    let net = Mlp::new(
        &[spec.state_dim + spec.action_dim, cfg.hidden, cfg.hidden, 1],
        Activation::Relu,
        Activation::Identity,
        &mut rng,
    );
    let delta = cfg.delta.unwrap_or(eps);
    let net = rs_fit(&data, net, cfg, delta, derive_tagged(seed, "rs-fit"))?;
    Ok(RobustCritic {
        net,
        delta,
        lambda: cfg.lambda,
    })
}
