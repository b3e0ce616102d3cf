//! Test-time state adversaries. Every adversary maps a state `s` into the
//! ℓ∞ ball `B_ε(s)`.
//!
//! Gray-box adversaries attack the raw policy and never touch the defending
//! transform; white-box adversaries differentiate through it (straight-through
//! for the quantizers, exactly for denoisers).

mod objectives;
mod paad;
mod pgd;
mod rs;

pub use objectives::{action_diff_objective, diag_gaussian_kl_rows, min_q_objective, q_of_policy};
pub use paad::{gae, paad_train, ppo_clip_objective, ppo_loss_and_grad, PaadAdversary, PpoConfig};
pub use pgd::{pgd_maximize, pgd_maximize_batch, sign, Evaluation, PgdParams};
pub use rs::{
    rs_collect, rs_fit, rs_loss_and_grad, rs_train, smoothness_penalty, worst_smoothness,
    RobustCritic, RsConfig, SarsaData,
};

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mlp, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sac::{GaussianPolicy, SacAgent};
use crate::transforms::{StateTransform, Transform};

/// Membership slack for the ε-ball.
pub const BALL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Random,
    ActionDiff,
    MinQ,
    Rs,
    Paad,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::None,
        AttackKind::Random,
        AttackKind::ActionDiff,
        AttackKind::MinQ,
        AttackKind::Rs,
        AttackKind::Paad,
    ];

    /// Report column heading.
    pub fn column(self) -> &'static str {
        match self {
            AttackKind::None => "Natural",
            AttackKind::Random => "Random",
            AttackKind::ActionDiff => "ActionDiff",
            AttackKind::MinQ => "MinQ",
            AttackKind::Rs => "RS",
            AttackKind::Paad => "PAAD",
        }
    }

    /// Desk-scale stand-ins for published attacks.
    pub fn simplified(self) -> bool {
        matches!(self, AttackKind::Rs | AttackKind::Paad)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let k: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match k.to_ascii_lowercase().as_str() {
            "none" | "natural" => Ok(Self::None),
            "random" => Ok(Self::Random),
            "actiondiff" => Ok(Self::ActionDiff),
            "minq" => Ok(Self::MinQ),
            "rs" | "robustsarsa" => Ok(Self::Rs),
            "paad" => Ok(Self::Paad),
            _ => Err(Error::Config(format!("unknown attack `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    #[default]
    GrayBox,
    WhiteBox,
}

impl std::str::FromStr for AttackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let k: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match k.to_ascii_lowercase().as_str() {
            "gray" | "grey" | "graybox" | "greybox" => Ok(Self::GrayBox),
            "white" | "whitebox" => Ok(Self::WhiteBox),
            _ => Err(Error::Config(format!("unknown attack mode `{s}`"))),
        }
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::GrayBox => "gray_box",
            AttackMode::WhiteBox => "white_box",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub eps: f64,
    pub eta: f64,
    pub steps: usize,
    pub mode: AttackMode,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            eps: 0.1,
            eta: 0.1,
            steps: 10,
            mode: AttackMode::GrayBox,
        }
    }
}

impl AttackSpec {
    pub fn new(kind: AttackKind, eps: f64, mode: AttackMode) -> Self {
        Self {
            kind,
            eps,
            mode,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != AttackKind::None && !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("attack.eps must be > 0, got {}", self.eps)));
        }
        PgdParams::new(self.eps.max(0.0), self.eta, self.steps).map(|_| ())
    }

    pub fn pgd(&self) -> PgdParams {
        PgdParams {
            eps: self.eps,
            eta: self.eta,
            steps: self.steps,
        }
    }
}

/// `{s~ : ||s~ - s||∞ <= radius}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBall {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl PerturbationBall {
    pub fn new(center: &[f64], radius: f64) -> Self {
        Self {
            center: center.to_vec(),
            radius,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.center.len()
            && x.iter()
                .zip(&self.center)
                .all(|(a, c)| (a - c).abs() <= self.radius + BALL_TOL)
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .map(|(a, c)| a.clamp(c - self.radius, c + self.radius))
            .collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        random_attack(&self.center, self.radius, rng)
    }
}

/// `s + u`, `u ~ U([-ε, ε]^d)`.
pub fn random_attack(s: &[f64], eps: f64, rng: &mut Rng) -> Vec<f64> {
    if eps <= 0.0 {
        return s.to_vec();
    }
    s.iter().map(|v| v + rng.gen_range(-eps..=eps)).collect()
}

/// A state adversary `Ψ`. Row `i` of a batch uses `rngs[i]`, so batched and
/// one-at-a-time use give identical results.
pub trait Adversary: Send + Sync {
    fn spec(&self) -> &AttackSpec;

    fn perturb_batch(&self, states: &Tensor, rngs: &mut [Rng]) -> Result<Tensor>;

    fn perturb(&self, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let mut one = [rng.clone()];
        let out = self.perturb_batch(&Tensor::row(s), &mut one)?;
        *rng = one[0].clone();
        Ok(out.into_data())
    }

    /// Desk-scale simplification of a published method.
    fn simplified(&self) -> bool {
        self.spec().kind.simplified()
    }
}

/// What an adversary may know about its victim.
#[derive(Clone)]
pub struct AttackBundle {
    pub policy: GaussianPolicy,
    pub critic: Mlp,
    /// The defending transform, used only by white-box attacks.
    pub transform: Option<Arc<dyn StateTransform>>,
    pub rs_critic: Option<RobustCritic>,
    pub paad: Option<PaadAdversary>,
}

impl AttackBundle {
    pub fn from_agent(agent: &SacAgent) -> Self {
        let transform: Option<Arc<dyn StateTransform>> = match agent.transform {
            Transform::Identity => None,
            ref t => Some(Arc::new(t.clone())),
        };
        Self {
            policy: agent.policy.clone(),
            critic: agent.critics.q1.clone(),
            transform,
            rs_critic: None,
            paad: None,
        }
    }
}

struct NoAttack(AttackSpec);

impl Adversary for NoAttack {
    fn spec(&self) -> &AttackSpec {
        &self.0
    }
    fn perturb_batch(&self, states: &Tensor, _: &mut [Rng]) -> Result<Tensor> {
        Ok(states.clone())
    }
}

struct RandomAttack(AttackSpec);

impl Adversary for RandomAttack {
    fn spec(&self) -> &AttackSpec {
        &self.0
    }
    fn perturb_batch(&self, states: &Tensor, rngs: &mut [Rng]) -> Result<Tensor> {
        check_rngs(states, rngs)?;
        let rows: Vec<Vec<f64>> = (0..states.rows())
            .map(|r| random_attack(states.row_slice(r), self.0.eps, &mut rngs[r]))
            .collect();
        Ok(Tensor::matrix(states.rows(), states.cols(), rows.concat()))
    }
}

enum Objective {
    ActionDiff,
    /// Minimizes the given critic (the agent's Q1 or a robust-Sarsa critic).
    MinQ(Mlp),
}

struct GradientAttack {
    spec: AttackSpec,
    policy: GaussianPolicy,
    objective: Objective,
    transform: Option<Arc<dyn StateTransform>>,
}

impl Adversary for GradientAttack {
    fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    fn perturb_batch(&self, states: &Tensor, rngs: &mut [Rng]) -> Result<Tensor> {
        check_rngs(states, rngs)?;
        let t = self.transform.as_deref();
        let out = match &self.objective {
            Objective::ActionDiff => {
                // the KL and its gradient vanish at s~ = s, so start at a random point in the ball
                let start: Vec<f64> = rngs
                    .iter_mut()
                    .flat_map(|rng| (0..states.cols()).map(|_| rng.gen_range(-1.0..=1.0)).collect::<Vec<_>>())
                    .collect();
                let start = Tensor::matrix(states.rows(), states.cols(), start);
                let f = action_diff_objective(&self.policy, t, states)?;
                pgd_maximize_batch(f, states, self.spec.pgd(), Some(start))?
            }
            Objective::MinQ(q) => {
                let f = min_q_objective(&self.policy, q, t, states);
                pgd_maximize_batch(f, states, self.spec.pgd(), None)?
            }
        };
        Ok(out)
    }
}

struct PaadAttack {
    spec: AttackSpec,
    adversary: PaadAdversary,
}

impl Adversary for PaadAttack {
    fn spec(&self) -> &AttackSpec {
        &self.spec
    }
    fn perturb_batch(&self, states: &Tensor, _: &mut [Rng]) -> Result<Tensor> {
        self.adversary.attack(states, self.spec.eps)
    }
}

fn check_rngs(states: &Tensor, rngs: &[Rng]) -> Result<()> {
    if rngs.len() != states.rows() {
        return Err(Error::Shape(format!(
            "{} random streams for {} states",
            rngs.len(),
            states.rows()
        )));
    }
    Ok(())
}

/// Builds `Ψ` for `spec`. RS and PA-AD need their trained artifacts in the
/// bundle; asking for them without one is a contract error.
pub fn make_adversary(spec: &AttackSpec, bundle: &AttackBundle) -> Result<Box<dyn Adversary>> {
    spec.validate()?;
    let transform = match spec.mode {
        AttackMode::GrayBox => None,
        AttackMode::WhiteBox => bundle.transform.clone(),
    };
    let gradient = |objective| -> Box<dyn Adversary> {
        Box::new(GradientAttack {
            spec: *spec,
            policy: bundle.policy.clone(),
            objective,
            transform: transform.clone(),
        })
    };
    Ok(match spec.kind {
        AttackKind::None => Box::new(NoAttack(*spec)),
        AttackKind::Random => Box::new(RandomAttack(*spec)),
        AttackKind::ActionDiff => gradient(Objective::ActionDiff),
        AttackKind::MinQ => gradient(Objective::MinQ(bundle.critic.clone())),
        AttackKind::Rs => {
            let rs = bundle
                .rs_critic
                .as_ref()
                .ok_or_else(|| Error::Contract("RS attack needs a trained robust critic".into()))?;
            gradient(Objective::MinQ(rs.net.clone()))
        }
        AttackKind::Paad => {
            let adversary = bundle
                .paad
                .clone()
                .ok_or_else(|| Error::Contract("PA-AD attack needs a trained adversary".into()))?;
            Box::new(PaadAttack {
                spec: *spec,
                adversary,
            })
        }
    })
}
