//! Numerical checks of the value-gap argument: Gaussian KL, Pinsker's
//! inequality, a Lipschitz estimate of the policy mean, the KL chain and an
//! empirical report of both sides of the gap bound.

mod report;

pub use report::{empirical_gap_bound, BoundReport, GapOptions};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sac::GaussianPolicy;

fn check_variances(var: &[f64]) -> Result<()> {
    match var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        Some(v) => Err(Error::Contract(format!("variance must be positive, got {v}"))),
        None => Ok(()),
    }
}

fn check_dims(mu1: &[f64], mu2: &[f64], var: &[f64]) -> Result<()> {
    if mu1.len() != mu2.len() || mu1.len() != var.len() {
        return Err(Error::Shape(format!(
            "gaussian dims differ: {} / {} / {}",
            mu1.len(),
            mu2.len(),
            var.len()
        )));
    }
    Ok(())
}

/// `KL(N(mu1, diag var1) || N(mu2, diag var2))`.
pub fn gaussian_kl_diag(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> Result<f64> {
    check_dims(mu1, mu2, var1)?;
    check_dims(mu1, mu2, var2)?;
    check_variances(var1)?;
    check_variances(var2)?;
    Ok((0..mu1.len())
        .map(|j| {
            let d = mu2[j] - mu1[j];
            0.5 * ((var2[j] / var1[j]).ln() - 1.0 + (var1[j] + d * d) / var2[j])
        })
        .sum())
}

/// Shared-covariance KL: `½ (mu2 - mu1)ᵀ Σ⁻¹ (mu2 - mu1)`.
pub fn gaussian_kl(mu1: &[f64], mu2: &[f64], var: &[f64]) -> Result<f64> {
    gaussian_kl_diag(mu1, var, mu2, var)
}

fn log_density(x: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln()))
        .sum()
}

/// Monte Carlo KL estimate from draws of the first distribution.
pub fn gaussian_kl_monte_carlo(
    mu1: &[f64],
    var1: &[f64],
    mu2: &[f64],
    var2: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    check_dims(mu1, mu2, var1)?;
    check_variances(var1)?;
    check_variances(var2)?;
    let sd: Vec<f64> = var1.iter().map(|v| v.sqrt()).collect();
    let mut x = vec![0.0; mu1.len()];
    let mut acc = 0.0;
    for _ in 0..samples {
        for j in 0..x.len() {
            let z: f64 = StandardNormal.sample(rng);
            x[j] = mu1[j] + sd[j] * z;
        }
        acc += log_density(&x, mu1, var1) - log_density(&x, mu2, var2);
    }
    Ok(acc / samples as f64)
}

/// Outcome of comparing a total-variation estimate with Pinsker's bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinskerCheck {
    pub tv: f64,
    /// Standard error of `tv` (zero for quadrature).
    pub tv_stderr: f64,
    pub kl: f64,
    /// `sqrt(kl / 2)`.
    pub bound: f64,
    pub holds: bool,
}

/// Estimates `D_TV` between two diagonal Gaussians (quadrature in 1-D, Monte
/// Carlo otherwise) and checks `D_TV <= sqrt(KL / 2)` up to three standard
/// errors of the estimate.
pub fn tv_pinsker_check(
    mu1: &[f64],
    var1: &[f64],
    mu2: &[f64],
    var2: &[f64],
    n_samples: usize,
    rng: &mut Rng,
) -> Result<PinskerCheck> {
    let kl = gaussian_kl_diag(mu1, var1, mu2, var2)?;
    let bound = (kl / 2.0).sqrt();
    let (tv, tv_stderr) = if mu1.len() == 1 {
        (tv_quadrature_1d(mu1[0], var1[0], mu2[0], var2[0], n_samples.max(2000)), 0.0)
    } else {
        tv_monte_carlo(mu1, var1, mu2, var2, n_samples.max(1), rng)
    };
    let holds = tv <= bound + 3.0 * tv_stderr + 1e-9;
    Ok(PinskerCheck {
        tv,
        tv_stderr,
        kl,
        bound,
        holds,
    })
}

fn tv_quadrature_1d(m1: f64, v1: f64, m2: f64, v2: f64, n: usize) -> f64 {
    let (s1, s2) = (v1.sqrt(), v2.sqrt());
    let lo = (m1 - 12.0 * s1).min(m2 - 12.0 * s2);
    let hi = (m1 + 12.0 * s1).max(m2 + 12.0 * s2);
    // Composite Simpson needs an even panel count.
    let n = n + n % 2;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| (log_density(&[x], &[m1], &[v1]).exp() - log_density(&[x], &[m2], &[v2]).exp()).abs();
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 * acc * h / 3.0
}

/// `D_TV = E_p[(1 - q/p)+]` with its standard error.
fn tv_monte_carlo(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64], n: usize, rng: &mut Rng) -> (f64, f64) {
    let sd: Vec<f64> = var1.iter().map(|v| v.sqrt()).collect();
    let mut x = vec![0.0; mu1.len()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        for j in 0..x.len() {
            let z: f64 = StandardNormal.sample(rng);
            x[j] = mu1[j] + sd[j] * z;
        }
        let ratio = (log_density(&x, mu2, var2) - log_density(&x, mu1, var1)).exp();
        let term = (1.0 - ratio).max(0.0);
        sum += term;
        sum_sq += term * term;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Empirical Lipschitz constant of a mean map, in squared-ratio form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    /// `max ‖μ(s1) − μ(s2)‖² / ‖s1 − s2‖²` over the sampled pairs: a lower
    /// bound on the true constant, never an upper one.
    pub k_hat: f64,
    pub pairs: usize,
}

/// Samples `pair_count` pairs, half drawn across `states` and half local
/// (the second point uniform in the ε-ball of the first), and returns the
/// largest squared output/input distance ratio.
pub fn lipschitz_estimate<F>(
    mean_fn: F,
    states: &Tensor,
    pair_count: usize,
    eps: f64,
    rng: &mut Rng,
) -> Result<LipschitzEstimate>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if states.rows() == 0 || pair_count == 0 {
        return Ok(LipschitzEstimate { k_hat: 0.0, pairs: 0 });
    }
    let (a, b) = sample_pairs(states, pair_count, eps, true, rng);
    let (ma, mb) = (mean_fn(&a)?, mean_fn(&b)?);
    let mut k_hat: f64 = 0.0;
    for r in 0..a.rows() {
        let din = sq_dist(a.row_slice(r), b.row_slice(r));
        if din > 0.0 {
            k_hat = k_hat.max(sq_dist(ma.row_slice(r), mb.row_slice(r)) / din);
        }
    }
    Ok(LipschitzEstimate { k_hat, pairs: a.rows() })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Pairs of states: local ones perturb a sampled state inside its ε-ball;
/// with `mixed`, every other pair joins two independently sampled states.
fn sample_pairs(states: &Tensor, count: usize, eps: f64, mixed: bool, rng: &mut Rng) -> (Tensor, Tensor) {
    let n = states.rows();
    let mut a = Vec::with_capacity(count);
    let mut b = Vec::with_capacity(count);
    for i in 0..count {
        let s = states.row_slice(rng.gen_range(0..n)).to_vec();
        let t = if mixed && i % 2 == 1 {
            states.row_slice(rng.gen_range(0..n)).to_vec()
        } else {
            s.iter().map(|v| v + rng.gen_range(-1.0..=1.0) * eps).collect()
        };
        a.push(s);
        b.push(t);
    }
    (Tensor::from_rows(&a), Tensor::from_rows(&b))
}

/// Fraction of ε-ball pairs satisfying `KL(π(·|s) ‖ π(·|s̃)) ≤ L̂·K̂·‖s − s̃‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainCheck {
    pub pairs: usize,
    pub k_hat: f64,
    /// `1 / (2 min σ²)` with the live, state-dependent σ.
    pub l_live: f64,
    /// Same with σ frozen to its state average.
    pub l_frozen: f64,
    pub holds_live: f64,
    pub holds_frozen: f64,
    /// Pair indices violating the frozen-σ chain.
    pub violations_frozen: Vec<usize>,
}

/// Checks the KL → Lipschitz chain on `pairs` fresh ε-ball pairs. `K̂` is
/// estimated from a disjoint sample of `lipschitz_pairs` pairs.
pub fn kl_chain_check(
    policy: &GaussianPolicy,
    states: &Tensor,
    eps: f64,
    pairs: usize,
    lipschitz_pairs: usize,
    rng: &mut Rng,
) -> Result<ChainCheck> {
    let mean_fn = |x: &Tensor| policy.gaussian(x).map(|(mu, _)| mu);
    let k_hat = lipschitz_estimate(mean_fn, states, lipschitz_pairs, eps, rng)?.k_hat;
    let (s, t) = sample_pairs(states, pairs, eps, false, rng);
    let (mu_s, ls_s) = policy.gaussian(&s)?;
    let (mu_t, ls_t) = policy.gaussian(&t)?;
    let (_, ls_all) = policy.gaussian(states)?;

    let min_var = ls_s
        .data()
        .iter()
        .chain(ls_t.data())
        .chain(ls_all.data())
        .fold(f64::INFINITY, |m, l| m.min((2.0 * l).exp()));
    let ad = ls_all.cols();
    let frozen: Vec<f64> = (0..ad)
        .map(|j| {
            let sd = (0..ls_all.rows()).map(|r| ls_all.get(r, j).exp()).sum::<f64>() / ls_all.rows() as f64;
            sd * sd
        })
        .collect();
    let l_live = 1.0 / (2.0 * min_var);
    let l_frozen = 1.0 / (2.0 * frozen.iter().cloned().fold(f64::INFINITY, f64::min));

    let (mut ok_live, mut ok_frozen) = (0usize, 0usize);
    let mut violations_frozen = Vec::new();
    for r in 0..s.rows() {
        let d2 = sq_dist(s.row_slice(r), t.row_slice(r));
        let tol = 1e-12 * (1.0 + d2);
        let var_s: Vec<f64> = ls_s.row_slice(r).iter().map(|l| (2.0 * l).exp()).collect();
        let var_t: Vec<f64> = ls_t.row_slice(r).iter().map(|l| (2.0 * l).exp()).collect();
        let live = gaussian_kl_diag(mu_s.row_slice(r), &var_s, mu_t.row_slice(r), &var_t)?;
        if live <= l_live * k_hat * d2 + tol {
            ok_live += 1;
        }
        let fz = gaussian_kl(mu_s.row_slice(r), mu_t.row_slice(r), &frozen)?;
        if fz <= l_frozen * k_hat * d2 + tol {
            ok_frozen += 1;
        } else {
            violations_frozen.push(r);
        }
    }
    let n = s.rows().max(1) as f64;
    Ok(ChainCheck {
        pairs: s.rows(),
        k_hat,
        l_live,
        l_frozen,
        holds_live: ok_live as f64 / n,
        holds_frozen: ok_frozen as f64 / n,
        violations_frozen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(gaussian_kl(&[0.3, -1.0], &[0.3, -1.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((gaussian_kl(&[0.0], &[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(gaussian_kl(&[0.0], &[1.0], &[0.0]), Err(Error::Contract(_))));
        assert!(matches!(gaussian_kl(&[0.0], &[1.0], &[-1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn pinsker_reference_case() {
        let mut rng = seeded(0);
        let c = tv_pinsker_check(&[0.0], &[1.0], &[1.0], &[1.0], 20_000, &mut rng).unwrap();
        assert!((c.tv - 0.382_924_922_548_026).abs() < 1e-8, "{}", c.tv);
        assert!((c.bound - 0.5).abs() < 1e-12 && c.holds);
        let same = tv_pinsker_check(&[0.2, 0.1], &[1.0, 3.0], &[0.2, 0.1], &[1.0, 3.0], 1000, &mut rng).unwrap();
        assert_eq!(same.tv, 0.0);
        assert!(same.holds);
    }

    #[test]
    fn lipschitz_of_linear_and_constant_maps() {
        let mut rng = seeded(1);
        let states = Tensor::from_rows(&(0..50).map(|i| vec![i as f64 * 0.1, -0.3 * i as f64]).collect::<Vec<_>>());
        let lin = lipschitz_estimate(|x| Ok(x.map(|v| 2.0 * v)), &states, 200, 0.1, &mut rng).unwrap();
        assert!((lin.k_hat - 4.0).abs() < 1e-9);
        let flat = lipschitz_estimate(|x| Ok(Tensor::filled(x.rows(), 1, 0.7)), &states, 200, 0.1, &mut rng).unwrap();
        assert_eq!(flat.k_hat, 0.0);
    }
}
