//! Differentiable attack objectives, evaluated row by row.

use crate::diffcore::{Mlp, Tape, Tensor, Var};
use crate::error::Result;
use crate::sac::{hcat, GaussianPolicy};
use crate::transforms::StateTransform;

use super::pgd::Evaluation;

fn policy_input<'t>(x: Var<'t>, transform: Option<&dyn StateTransform>) -> Var<'t> {
    match transform {
        Some(t) => t.apply_var(x),
        None => x,
    }
}

fn clean_input(s: &Tensor, transform: Option<&dyn StateTransform>) -> Tensor {
    match transform {
        Some(t) => t.apply_batch(s),
        None => s.clone(),
    }
}

/// Per-row closed-form KL between diagonal Gaussians given means and log-stds.
pub fn diag_gaussian_kl_rows(mu1: &Tensor, ls1: &Tensor, mu2: &Tensor, ls2: &Tensor) -> Vec<f64> {
    (0..mu1.rows())
        .map(|r| {
            let (m1, l1, m2, l2) = (mu1.row_slice(r), ls1.row_slice(r), mu2.row_slice(r), ls2.row_slice(r));
            (0..m1.len())
                .map(|j| {
                    let d = m1[j] - m2[j];
                    l2[j] - l1[j] + ((2.0 * l1[j]).exp() + d * d) / (2.0 * (2.0 * l2[j]).exp()) - 0.5
                })
                .sum()
        })
        .collect()
}

/// `KL(pi(.|s) || pi(.|s~))` over the pre-tanh Gaussians. With a transform
/// both sides go through it; without one the raw policy is attacked.
pub fn action_diff_objective<'a>(
    policy: &'a GaussianPolicy,
    transform: Option<&'a dyn StateTransform>,
    clean: &Tensor,
) -> Result<impl FnMut(&Tensor) -> Result<Evaluation> + 'a> {
    let (mu1, ls1) = policy.gaussian(&clean_input(clean, transform))?;
    let var1 = ls1.map(|l| (2.0 * l).exp());
    Ok(move |x: &Tensor| {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let (mu2, ls2) = policy.gaussian_var(policy_input(xv, transform))?;
        let diff = mu2 - tape.constant(mu1.clone());
        let ratio = (tape.constant(var1.clone()) + diff.square()) * ls2.scale(-2.0).exp();
        let kl = (ls2 - tape.constant(ls1.clone()) + ratio.scale(0.5)).add_scalar(-0.5).sum_cols();
        let grads = tape.backward(kl.sum())?;
        Ok((kl.value().into_data(), grads.wrt(xv)))
    })
}

/// `-Q(s, tanh(mu(s~)))`: maximizing it minimizes the critic's value of the
/// action induced by the perturbed state, scored at the clean state.
pub fn min_q_objective<'a>(
    policy: &'a GaussianPolicy,
    critic: &'a Mlp,
    transform: Option<&'a dyn StateTransform>,
    clean: &Tensor,
) -> impl FnMut(&Tensor) -> Result<Evaluation> + 'a {
    let clean = clean.clone();
    move |x: &Tensor| {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let (mu, _) = policy.gaussian_var(policy_input(xv, transform))?;
        let sa = tape.constant(clean.clone()).concat_cols(mu.tanh());
        let q = critic.forward_frozen(sa)?;
        let neg = -q;
        let grads = tape.backward(neg.sum())?;
        Ok((neg.value().into_data(), grads.wrt(xv)))
    }
}

/// Critic value of the deterministic action at `policy_states`, scored at `states`.
pub fn q_of_policy(
    policy: &GaussianPolicy,
    critic: &Mlp,
    states: &Tensor,
    policy_states: &Tensor,
) -> Result<Vec<f64>> {
    let a = policy.deterministic(policy_states)?;
    Ok(critic.predict(&hcat(states, &a))?.into_data())
}
