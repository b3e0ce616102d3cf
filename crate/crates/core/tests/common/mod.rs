//! Helpers shared by the integration tests: the finite-difference suite for
//! every differentiable loss, and pendulum experiment configs.

#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng as _;
use workbench::attacks::{
    action_diff_objective, min_q_objective, ppo_loss_and_grad, rs_loss_and_grad, PaadAdversary, PpoConfig,
    SarsaData,
};
use workbench::diffcore::{finite_diff_rel_error, Activation, Mlp, Tensor};
use workbench::harness::{ExperimentConfig, Workspace};
use workbench::rng::{derive_seed, seeded, Rng};
use workbench::sac::{
    actor_loss, critic_loss, critic_target, temperature_grad, temperature_loss, Batch, CriticPair,
    GaussianPolicy, UpdateContext,
};
use workbench::transforms::{denoiser_loss, denoiser_loss_and_grad, DenoiserConfig, DenoiserModel, DenoiserVariant, Transform};

/// Points per loss.
pub const GRAD_POINTS: usize = 100;
pub const GRAD_TOL: f64 = 1e-4;
const H: f64 = 1e-6;

const SD: usize = 3;
const AD: usize = 1;
const HIDDEN: usize = 8;
const ROWS: usize = 6;

fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

fn normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)).collect(),
    )
}

fn critic(rng: &mut Rng) -> Mlp {
    Mlp::new(&[SD + AD, HIDDEN, HIDDEN, 1], Activation::Relu, Activation::Identity, rng)
}

fn batch(rng: &mut Rng) -> Batch {
    Batch {
        states: uniform(rng, ROWS, SD, -1.0, 1.0),
        actions: uniform(rng, ROWS, AD, -1.0, 1.0),
        rewards: uniform(rng, ROWS, 1, 0.0, 1.0),
        next_states: uniform(rng, ROWS, SD, -1.0, 1.0),
        dones: Tensor::matrix(ROWS, 1, (0..ROWS).map(|i| (i % 3 == 0) as u8 as f64).collect()),
    }
}

fn over_params<F>(net: &Mlp, mut loss: F) -> f64
where
    F: FnMut(&Mlp) -> (f64, Vec<f64>),
{
    let point = net.flatten();
    finite_diff_rel_error(
        |p| {
            let mut n = net.clone();
            n.set_flat(p);
            loss(&n)
        },
        &point,
        H,
    )
}

fn critic_case(rng: &mut Rng) -> f64 {
    let policy = GaussianPolicy::new(SD, AD, HIDDEN, rng);
    let critics = CriticPair::new(critic(rng), critic(rng));
    let b = batch(rng);
    let transform = Transform::Identity;
    let ctx = UpdateContext::new(&transform);
    let noise = normal(rng, ROWS, AD);
    let y = critic_target(ctx, &b, &policy, &critics, 0.2, 0.99, &noise).unwrap();
    over_params(&critics.q1, |n| {
        let (l, g) = critic_loss(ctx, n, &b, &y).unwrap();
        (l, g.flatten())
    })
}

fn actor_case(rng: &mut Rng) -> f64 {
    let policy = GaussianPolicy::new(SD, AD, HIDDEN, rng);
    let critics = CriticPair::new(critic(rng), critic(rng));
    let states = uniform(rng, ROWS, SD, -1.0, 1.0);
    let noise = normal(rng, ROWS, AD);
    let alpha = rng.gen_range(0.05..1.0);
    let transform = Transform::Identity;
    let ctx = UpdateContext::new(&transform);
    over_params(&policy.net, |n| {
        let p = GaussianPolicy::from_net(n.clone()).unwrap();
        let step = actor_loss(ctx, &p, &critics, alpha, &states, &noise).unwrap();
        (step.loss, step.grads.flatten())
    })
}

fn temperature_case(rng: &mut Rng) -> f64 {
    let mean_logp = rng.gen_range(-3.0..3.0);
    let target = -(AD as f64);
    let point = [rng.gen_range(-3.0..1.0)];
    finite_diff_rel_error(
        |x| (temperature_loss(x[0], mean_logp, target), vec![temperature_grad(x[0], mean_logp, target)]),
        &point,
        H,
    )
}

fn denoiser_case(rng: &mut Rng, variant: DenoiserVariant) -> f64 {
    let cfg = DenoiserConfig {
        variant,
        hidden: HIDDEN,
        beta: 0.1,
        ..DenoiserConfig::default()
    };
    let model = DenoiserModel::new(SD, &cfg, rng);
    let clean = uniform(rng, ROWS, SD, -1.0, 1.0);
    let noisy = clean.map(|v| v + 0.1);
    let noise_seed = rng.gen();
    let n_enc = model.encoder.num_params();
    let point: Vec<f64> = model.encoder.flatten().into_iter().chain(model.decoder.flatten()).collect();
    let with = |p: &[f64]| {
        let mut m = model.clone();
        m.encoder.set_flat(&p[..n_enc]);
        m.decoder.set_flat(&p[n_enc..]);
        m
    };
    let (_, grad) = denoiser_loss_and_grad(&with(&point), &noisy, &clean, noise_seed).unwrap();
    finite_diff_rel_error(
        |p| {
            let loss = denoiser_loss(&with(p), &noisy, &clean, noise_seed).unwrap();
            (loss, if p == point.as_slice() { grad.clone() } else { Vec::new() })
        },
        &point,
        H,
    )
}

fn input_point(rng: &mut Rng) -> (Tensor, Vec<f64>) {
    let clean: Vec<f64> = (0..SD).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let point = clean.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
    (Tensor::row(&clean), point)
}

fn action_diff_case(rng: &mut Rng) -> f64 {
    let policy = GaussianPolicy::new(SD, AD, HIDDEN, rng);
    let (clean, point) = input_point(rng);
    let mut f = action_diff_objective(&policy, None, &clean).unwrap();
    finite_diff_rel_error(
        |x| {
            let (v, g) = f(&Tensor::row(x)).unwrap();
            (v[0], g.into_data())
        },
        &point,
        H,
    )
}

fn min_q_case(rng: &mut Rng) -> f64 {
    let policy = GaussianPolicy::new(SD, AD, HIDDEN, rng);
    let q = critic(rng);
    let (clean, point) = input_point(rng);
    let mut f = min_q_objective(&policy, &q, None, &clean);
    finite_diff_rel_error(
        |x| {
            let (v, g) = f(&Tensor::row(x)).unwrap();
            (v[0], g.into_data())
        },
        &point,
        H,
    )
}

fn rs_case(rng: &mut Rng) -> f64 {
    let net = critic(rng);
    let b = batch(rng);
    let data = SarsaData {
        states: b.states.clone(),
        actions: b.actions,
        rewards: b.rewards,
        next_states: b.next_states,
        next_actions: uniform(rng, ROWS, AD, -1.0, 1.0),
        dones: b.dones,
    };
    let y = uniform(rng, ROWS, 1, -1.0, 1.0);
    let worst = b.states.map(|v| v + 0.05);
    over_params(&net, |n| {
        let (l, g) = rs_loss_and_grad(n, &data, &y, &worst, 0.5).unwrap();
        (l, g.flatten())
    })
}

fn ppo_case(rng: &mut Rng) -> f64 {
    let cfg = PpoConfig {
        hidden: HIDDEN,
        ..PpoConfig::default()
    };
    let mut adv = PaadAdversary::new(SD, &cfg, rng.gen());
    // Move the output layer off its tiny initial scale so the ratio varies.
    adv.actor.scale_output_layer(50.0);
    let states = uniform(rng, ROWS, SD, -1.0, 1.0);
    let raw = uniform(rng, ROWS, SD, -1.0, 1.0);
    let old = uniform(rng, ROWS, 1, -3.0, -1.0);
    let a = normal(rng, ROWS, 1);
    let n_actor = adv.actor.num_params();
    let point: Vec<f64> = adv.actor.flatten().into_iter().chain(adv.log_std.iter().copied()).collect();
    finite_diff_rel_error(
        |p| {
            let mut m = adv.clone();
            m.actor.set_flat(&p[..n_actor]);
            m.log_std = p[n_actor..].to_vec();
            let (l, ga, gs) = ppo_loss_and_grad(&m, &states, &raw, &old, &a, 0.2).unwrap();
            (l, ga.flatten().into_iter().chain(gs).collect())
        },
        &point,
        H,
    )
}

/// Worst norm-wise relative error of each loss over `GRAD_POINTS` seeded points.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    type Case = fn(&mut Rng) -> f64;
    let cases: [(&'static str, Case); 9] = [
        ("critic (soft Bellman)", critic_case),
        ("actor", actor_case),
        ("temperature", temperature_case),
        ("aed", |r| denoiser_case(r, DenoiserVariant::Aed)),
        ("vaed", |r| denoiser_case(r, DenoiserVariant::Vaed)),
        ("action-diff objective", action_diff_case),
        ("min-q objective", min_q_case),
        ("robust sarsa", rs_case),
        ("ppo surrogate", ppo_case),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(c, (name, case))| {
            let worst = (0..GRAD_POINTS)
                .map(|i| case(&mut seeded(derive_seed(derive_seed(seed, c as u64), i as u64))))
                .fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}

/// Persistent workspace for the long-running suites, so trained agents are
/// reused between invocations.
pub fn acceptance_workspace() -> Workspace {
    let root = std::env::var_os("WORKBENCH_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    Workspace::new(root)
}

/// A pendulum experiment at the desk-scale protocol: 5 runs, 50 episodes,
/// master seed 0, 30k training steps.
pub fn pendulum(name: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"name = "{name}"
env = "pendulum-balance"
experiment.n_runs = 5
experiment.episodes = 50
experiment.seed = 0
{extra}
"#
    );
    ExperimentConfig::parse(&text).unwrap_or_else(|e| panic!("config {name}: {e}"))
}
