use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{kl_chain_check, tv_pinsker_check};
use crate::attacks::{make_adversary, pgd_maximize_batch, Adversary, AttackBundle, AttackKind, AttackMode, AttackSpec, PgdParams};
use crate::diffcore::{Tape, Tensor};
use crate::envs::Environment;
use crate::error::Result;
use crate::harness::{evaluate_traced, mean_std, EvalOptions};
use crate::rng::{derive_seed, derive_tagged, seeded, Rng};
use crate::sac::SacAgent;
use crate::transforms::{Phase, StateTransform, Transform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapOptions {
    pub episodes: usize,
    pub seed: u64,
    /// Ball radius for the distance search and the chain pairs.
    pub eps: f64,
    /// Visited states searched for the largest transformed-state distance.
    pub distance_states: usize,
    /// Uniform ball samples per searched state, on top of PGD.
    pub random_samples: usize,
    pub pgd_steps: usize,
    pub chain_pairs: usize,
    pub lipschitz_pairs: usize,
}

impl Default for GapOptions {
    fn default() -> Self {
        Self {
            episodes: 20,
            seed: 0,
            eps: 0.1,
            distance_states: 200,
            random_samples: 64,
            pgd_steps: 20,
            chain_pairs: 10_000,
            lipschitz_pairs: 10_000,
        }
    }
}

/// Both sides of the value-gap bound, measured rather than asserted: the
/// unknown problem constant κ stays symbolic, so the right-hand side is
/// reported per unit κ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub transform: String,
    /// Attack standing in for the optimal adversary; the gap is a lower bound.
    pub proxy: String,
    pub episodes: usize,
    /// Largest matched-start return difference, clean minus attacked.
    pub lhs_gap: f64,
    pub gap_mean: f64,
    /// Half-width of the normal 95% interval around `gap_mean`.
    pub gap_ci95: f64,
    /// Largest `‖T_train(s) − T_test(s~)‖₂` found over the searched balls.
    pub rhs_distance: f64,
    /// `sqrt(L·K / 2) · rhs_distance`, i.e. the bound divided by κ.
    pub rhs_bound_per_kappa: f64,
    pub zeta_per_kappa: f64,
    pub kl_max: f64,
    pub tv_max: f64,
    /// Squared-ratio Lipschitz estimate of the policy mean (a lower bound).
    pub lipschitz_k: f64,
    /// `1 / (2 min σ²)` with live σ(s).
    pub constant_l: f64,
    /// Same with σ frozen to its state average.
    pub constant_l_frozen: f64,
    pub chain_holds_live: f64,
    pub chain_holds_frozen: f64,
    pub visited_states: usize,
    pub distance_states: usize,
    pub chain_pairs: usize,
    pub lipschitz_pairs: usize,
}

impl BoundReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("transform", self.transform.clone()),
            ("proxy", self.proxy.clone()),
            ("episodes", self.episodes.to_string()),
            ("lhs_gap", self.lhs_gap.to_string()),
            ("gap_mean", self.gap_mean.to_string()),
            ("gap_ci95", self.gap_ci95.to_string()),
            ("rhs_distance", self.rhs_distance.to_string()),
            ("rhs_bound_per_kappa", self.rhs_bound_per_kappa.to_string()),
            ("zeta_per_kappa", self.zeta_per_kappa.to_string()),
            ("kl_max", self.kl_max.to_string()),
            ("tv_max", self.tv_max.to_string()),
            ("lipschitz_k", self.lipschitz_k.to_string()),
            ("constant_l", self.constant_l.to_string()),
            ("constant_l_frozen", self.constant_l_frozen.to_string()),
            ("chain_holds_live", self.chain_holds_live.to_string()),
            ("chain_holds_frozen", self.chain_holds_frozen.to_string()),
            ("visited_states", self.visited_states.to_string()),
            ("distance_states", self.distance_states.to_string()),
            ("chain_pairs", self.chain_pairs.to_string()),
            ("lipschitz_pairs", self.lipschitz_pairs.to_string()),
        ]
    }

    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn csv_header(&self) -> String {
        self.fields().into_iter().map(|(k, _)| k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.fields().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }
}

/// Transform applied when training: denoisers only act at test time.
fn train_side(t: &Transform) -> Transform {
    if t.active_in(Phase::Train) {
        t.clone()
    } else {
        Transform::Identity
    }
}

/// Per-row largest `‖target − T(x)‖₂` over the ε-ball around each row of
/// `centers`, by PGD (straight-through where `T` is not differentiable)
/// from the center and from a random start, plus uniform samples.
fn max_distance(
    transform: &Transform,
    centers: &Tensor,
    targets: &Tensor,
    opts: &GapOptions,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let dist = |x: &Tensor| -> Vec<f64> {
        let y = transform.apply_batch(x);
        (0..x.rows())
            .map(|r| {
                y.row_slice(r)
                    .iter()
                    .zip(targets.row_slice(r))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    };
    let mut best = dist(centers);
    if opts.eps <= 0.0 {
        return Ok(best);
    }
    let objective = |x: &Tensor| {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let d = (transform.apply_var(xv) - tape.constant(targets.clone())).square().sum_cols();
        let g = tape.backward(d.sum())?;
        Ok((d.value().into_data(), g.wrt(xv)))
    };
    let params = PgdParams::new(opts.eps, 1.0 / opts.pgd_steps.max(1) as f64, opts.pgd_steps)?;
    let (n, d) = (centers.rows(), centers.cols());
    let random_start = Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..=1.0)).collect());
    for start in [None, Some(random_start)] {
        let x = pgd_maximize_batch(objective, centers, params, start)?;
        for (b, v) in best.iter_mut().zip(dist(&x)) {
            *b = b.max(v);
        }
    }
    for _ in 0..opts.random_samples {
        let mut x = centers.clone();
        for v in x.data_mut() {
            *v += rng.gen_range(-1.0..=1.0) * opts.eps;
        }
        for (b, v) in best.iter_mut().zip(dist(&x)) {
            *b = b.max(v);
        }
    }
    Ok(best)
}

/// Matched-start rollouts with and without the adversary give the left-hand
/// side; a ball search over visited states gives the distance term, and the
/// KL chain supplies `L` and `K`. `adversary` is the proxy for the optimal
/// attack and `proxy` its label.
pub fn empirical_gap_bound(
    agent: &SacAgent,
    adversary: &dyn Adversary,
    proxy: &str,
    env: &dyn Environment,
    opts: &GapOptions,
) -> Result<BoundReport> {
    let mut rng = seeded(derive_tagged(opts.seed, "bound"));
    let none = make_adversary(
        &AttackSpec::new(AttackKind::None, 0.0, AttackMode::GrayBox),
        &AttackBundle::from_agent(agent),
    )?;
    let train_opts = EvalOptions {
        phase: Phase::Train,
        ..Default::default()
    };
    let (clean, mut visited) = evaluate_traced(agent, none.as_ref(), env, opts.episodes, opts.seed, train_opts)?;
    let (attacked, attacked_visited) =
        evaluate_traced(agent, adversary, env, opts.episodes, opts.seed, EvalOptions::default())?;
    visited.extend(attacked_visited);

    let gaps: Vec<f64> = clean.iter().zip(&attacked).map(|(c, a)| c - a).collect();
    let (gap_mean, gap_sd) = mean_std(&gaps);
    let n = gaps.len() as f64;
    let gap_ci95 = if gaps.len() > 1 {
        1.96 * gap_sd * (n / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    let lhs_gap = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut picked: Vec<&Vec<f64>> = visited.iter().collect();
    picked.shuffle(&mut rng);
    picked.truncate(opts.distance_states);
    let centers = Tensor::from_rows(&picked);
    let t_train = train_side(&agent.transform);
    let targets = t_train.apply_batch(&centers);
    let distances = max_distance(&agent.transform, &centers, &targets, opts, &mut rng)?;
    let rhs_distance = distances.iter().cloned().fold(0.0, f64::max);

    // Policy divergence between clean training-side inputs and attacked
    // test-side inputs at the same states.
    let attack_seed = derive_tagged(opts.seed, "bound-attack");
    let mut rngs: Vec<Rng> = (0..centers.rows()).map(|i| seeded(derive_seed(attack_seed, i as u64))).collect();
    let perturbed = adversary.perturb_batch(&centers, &mut rngs)?;
    let (mu1, ls1) = agent.policy.gaussian(&targets)?;
    let (mu2, ls2) = agent.policy.gaussian(&agent.transform.dispatch_batch(&perturbed, Phase::Test))?;
    let (mut kl_max, mut tv_max) = (0.0f64, 0.0f64);
    for r in 0..centers.rows() {
        let v1: Vec<f64> = ls1.row_slice(r).iter().map(|l| (2.0 * l).exp()).collect();
        let v2: Vec<f64> = ls2.row_slice(r).iter().map(|l| (2.0 * l).exp()).collect();
        let c = tv_pinsker_check(mu1.row_slice(r), &v1, mu2.row_slice(r), &v2, 2000, &mut rng)?;
        kl_max = kl_max.max(c.kl);
        tv_max = tv_max.max(c.tv);
    }

    let all = Tensor::from_rows(&visited);
    let chain = kl_chain_check(&agent.policy, &all, opts.eps, opts.chain_pairs, opts.lipschitz_pairs, &mut rng)?;
    let zeta_per_kappa = (chain.l_frozen * chain.k_hat / 2.0).sqrt();
    Ok(BoundReport {
        transform: agent.transform.kind().as_str().to_string(),
        proxy: proxy.to_string(),
        episodes: opts.episodes,
        lhs_gap,
        gap_mean,
        gap_ci95,
        rhs_distance,
        rhs_bound_per_kappa: zeta_per_kappa * rhs_distance,
        zeta_per_kappa,
        kl_max,
        tv_max,
        lipschitz_k: chain.k_hat,
        constant_l: chain.l_live,
        constant_l_frozen: chain.l_frozen,
        chain_holds_live: chain.holds_live,
        chain_holds_frozen: chain.holds_frozen,
        visited_states: visited.len(),
        distance_states: centers.rows(),
        chain_pairs: chain.pairs,
        lipschitz_pairs: opts.lipschitz_pairs,
    })
}
