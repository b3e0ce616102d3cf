//! The three SAC objectives and the soft Bellman target.

use std::sync::Mutex;

use crate::diffcore::{Mlp, MlpGrads, Tape, Tensor};
use crate::error::Result;
use crate::transforms::{Phase, Transform};

use super::{Batch, GaussianPolicy};

/// Online and target Q-networks, each over the concatenation `[s, a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
}

impl CriticPair {
    pub fn new(q1: Mlp, q2: Mlp) -> Self {
        Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
        }
    }

    /// Moves both targets toward their online networks.
    pub fn ema_update(&mut self, tau: f64) {
        self.q1_target.ema_from(&self.q1, tau);
        self.q2_target.ema_from(&self.q2, tau);
    }
}

/// Horizontal concatenation of two batches with equal row counts.
pub fn hcat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows(), b.rows(), "hcat row mismatch");
    let (n, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut out = Vec::with_capacity(n * (ca + cb));
    for r in 0..n {
        out.extend_from_slice(a.row_slice(r));
        out.extend_from_slice(b.row_slice(r));
    }
    Tensor::matrix(n, ca + cb, out)
}

pub fn q_value(net: &Mlp, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
    net.predict(&hcat(states, actions))
}

/// Which network consumed an input, for placement checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetRole {
    Policy,
    Critic,
}

/// Records the state part of every network input during updates.
#[derive(Debug, Default)]
pub struct CallLog {
    events: Mutex<Vec<(NetRole, Tensor)>>,
}

impl CallLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, role: NetRole, states: &Tensor) {
        self.events.lock().unwrap().push((role, states.clone()));
    }

    pub fn events(&self) -> Vec<(NetRole, Tensor)> {
        self.events.lock().unwrap().clone()
    }
}

/// Shared inputs of one update step.
#[derive(Clone, Copy)]
pub struct UpdateContext<'a> {
    pub transform: &'a Transform,
    pub probe: Option<&'a CallLog>,
}

impl<'a> UpdateContext<'a> {
    pub fn new(transform: &'a Transform) -> Self {
        Self {
            transform,
            probe: None,
        }
    }

    fn policy_input(&self, states: &Tensor) -> Tensor {
        let x = self.transform.dispatch_batch(states, Phase::Train);
        self.log(NetRole::Policy, &x);
        x
    }

    fn log(&self, role: NetRole, states: &Tensor) {
        if let Some(p) = self.probe {
            p.record(role, states);
        }
    }
}

/// `y = r + gamma * (1 - done) * (min_i Q_target_i(s', a') - alpha * log pi(a'|T(s')))`
/// with `a'` drawn from the current policy using `noise`.
pub fn critic_target(
    ctx: UpdateContext<'_>,
    batch: &Batch,
    policy: &GaussianPolicy,
    critics: &CriticPair,
    alpha: f64,
    gamma: f64,
    noise: &Tensor,
) -> Result<Tensor> {
    let x = ctx.policy_input(&batch.next_states);
    let (a2, logp2) = policy.sample_with_noise(&x, noise)?;
    ctx.log(NetRole::Critic, &batch.next_states);
    let sa = hcat(&batch.next_states, &a2);
    let q1 = critics.q1_target.predict(&sa)?;
    let q2 = critics.q2_target.predict(&sa)?;
    let y = (0..batch.len())
        .map(|i| {
            let soft = q1.data()[i].min(q2.data()[i]) - alpha * logp2.data()[i];
            batch.rewards.data()[i] + gamma * (1.0 - batch.dones.data()[i]) * soft
        })
        .collect();
    Ok(Tensor::matrix(batch.len(), 1, y))
}

/// Mean squared error of one critic against fixed targets.
pub fn critic_loss(
    ctx: UpdateContext<'_>,
    net: &Mlp,
    batch: &Batch,
    y: &Tensor,
) -> Result<(f64, MlpGrads)> {
    ctx.log(NetRole::Critic, &batch.states);
    let tape = Tape::new();
    let input = tape.constant(hcat(&batch.states, &batch.actions));
    let (q, vars) = net.forward(input)?;
    let loss = (q - tape.constant(y.clone())).square().mean();
    let grads = tape.backward(loss)?;
    Ok((loss.item(), vars.grads(&grads)))
}

/// Output of the actor objective.
#[derive(Debug, Clone)]
pub struct ActorStep {
    pub loss: f64,
    pub grads: MlpGrads,
    /// Per-sample log-probabilities of the fresh actions (for the temperature).
    pub log_probs: Tensor,
}

/// `E[alpha * log pi(a|T(s)) - min_i Q_i(s, a)]`, `a` reparameterized; critic
/// weights are frozen.
pub fn actor_loss(
    ctx: UpdateContext<'_>,
    policy: &GaussianPolicy,
    critics: &CriticPair,
    alpha: f64,
    states: &Tensor,
    noise: &Tensor,
) -> Result<ActorStep> {
    let x = ctx.policy_input(states);
    let tape = Tape::new();
    let (action, logp, vars) = policy.rsample_var(tape.constant(x), noise)?;
    ctx.log(NetRole::Critic, states);
    let sa = tape.constant(states.clone()).concat_cols(action);
    let q = critics.q1.forward_frozen(sa)?.min(critics.q2.forward_frozen(sa)?);
    let loss = (logp.scale(alpha) - q).mean();
    let grads = tape.backward(loss)?;
    Ok(ActorStep {
        loss: loss.item(),
        grads: vars.grads(&grads),
        log_probs: logp.value(),
    })
}

/// Gradient of `J(alpha) = E[-alpha * log pi - alpha * H]` with respect to
/// `log alpha`, treating `log pi` as a constant.
pub fn temperature_grad(log_alpha: f64, mean_log_prob: f64, target_entropy: f64) -> f64 {
    log_alpha.exp() * (-mean_log_prob - target_entropy)
}

pub fn temperature_loss(log_alpha: f64, mean_log_prob: f64, target_entropy: f64) -> f64 {
    log_alpha.exp() * (-mean_log_prob - target_entropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Dense};
    use crate::rng::seeded;

    fn const_net(input: usize, value: f64) -> Mlp {
        Mlp::from_layers(vec![Dense {
            weight: Tensor::zeros(input, 1),
            bias: Tensor::filled(1, 1, value),
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn batch(n: usize, done: f64) -> Batch {
        Batch {
            states: Tensor::filled(n, 2, 0.3),
            actions: Tensor::filled(n, 1, 0.1),
            rewards: Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()),
            next_states: Tensor::filled(n, 2, -0.2),
            dones: Tensor::filled(n, 1, done),
        }
    }

    #[test]
    fn zero_discount_or_terminal_gives_reward() {
        let policy = GaussianPolicy::new(2, 1, 8, &mut seeded(0));
        let critics = CriticPair::new(const_net(3, 5.0), const_net(3, 7.0));
        let t = Transform::Identity;
        let noise = Tensor::zeros(4, 1);
        let y = critic_target(UpdateContext::new(&t), &batch(4, 0.0), &policy, &critics, 0.2, 0.0, &noise)
            .unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
        let y = critic_target(UpdateContext::new(&t), &batch(4, 1.0), &policy, &critics, 0.2, 0.99, &noise)
            .unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn critic_matching_targets_has_zero_loss() {
        let net = const_net(3, 2.5);
        let b = batch(3, 0.0);
        let (loss, g) =
            critic_loss(UpdateContext::new(&Transform::Identity), &net, &b, &Tensor::filled(3, 1, 2.5)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        let (loss, _) =
            critic_loss(UpdateContext::new(&Transform::Identity), &net, &batch(1, 0.0), &Tensor::scalar(1.0)).unwrap();
        assert!((loss - 2.25).abs() < 1e-15);
    }

    #[test]
    fn constant_critic_without_entropy_gives_zero_policy_gradient() {
        let policy = GaussianPolicy::new(2, 1, 8, &mut seeded(1));
        let critics = CriticPair::new(const_net(3, 1.0), const_net(3, 4.0));
        let noise = GaussianPolicy::sample_noise(5, 1, &mut seeded(2));
        let step = actor_loss(
            UpdateContext::new(&Transform::Identity),
            &policy,
            &critics,
            0.0,
            &Tensor::filled(5, 2, 0.7),
            &noise,
        )
        .unwrap();
        assert_eq!(step.loss, -1.0);
        assert!(step.grads.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn temperature_sign() {
        assert_eq!(temperature_grad(0.3, 1.0, -1.0), 0.0);
        // entropy (= -mean log pi) below target: gradient negative, alpha grows under descent
        assert!(temperature_grad(0.0, 2.0, -1.0) < 0.0);
        assert!(temperature_grad(0.0, -2.0, -1.0) > 0.0);
    }
}
