use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Activation, Mlp, MlpVars, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Added inside the tanh log-Jacobian to keep it finite at saturation.
pub const TANH_EPS: f64 = 1e-6;
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Tanh-squashed diagonal Gaussian policy. The trunk outputs
/// `[mu_1..mu_d, log_std_1..log_std_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
}

/// Log-density of `a = tanh(mu + sigma * eps)` given the noise that produced it.
pub fn squashed_log_prob(log_std: &[f64], eps: &[f64], action: &[f64]) -> f64 {
    log_std
        .iter()
        .zip(eps)
        .zip(action)
        .map(|((&ls, &e), &a)| -0.5 * e * e - ls - HALF_LOG_2PI - (1.0 - a * a + TANH_EPS).ln())
        .sum()
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let net = Mlp::new(
            &[state_dim, hidden, hidden, 2 * action_dim],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Self { net }
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.out_dim() % 2 != 0 {
            return Err(Error::Shape("policy trunk must output mean and log-std".into()));
        }
        Ok(Self { net })
    }

    pub fn state_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.out_dim() / 2
    }

    /// Pre-tanh mean and clamped log-std.
    pub fn gaussian(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.net.predict(x)?;
        let d = self.action_dim();
        let (n, mut mu, mut ls) = (out.rows(), Vec::new(), Vec::new());
        for r in 0..n {
            let row = out.row_slice(r);
            mu.extend_from_slice(&row[..d]);
            ls.extend(row[d..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)));
        }
        Ok((Tensor::matrix(n, d, mu), Tensor::matrix(n, d, ls)))
    }

    /// `tanh(mu(x))`.
    pub fn deterministic(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.net.predict(x)?;
        let d = self.action_dim();
        let rows: Vec<Vec<f64>> = (0..out.rows())
            .map(|r| out.row_slice(r)[..d].iter().map(|v| v.tanh()).collect())
            .collect();
        Ok(Tensor::from_rows(&rows))
    }

    /// Action and log-probability `[n, 1]` for explicit standard-normal noise.
    pub fn sample_with_noise(&self, x: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mu, ls) = self.gaussian(x)?;
        if !noise.same_shape(&mu) {
            return Err(Error::Shape("noise must match the action batch".into()));
        }
        let n = mu.rows();
        let mut actions = Vec::with_capacity(mu.len());
        let mut logp = Vec::with_capacity(n);
        for r in 0..n {
            let (m, l, e) = (mu.row_slice(r), ls.row_slice(r), noise.row_slice(r));
            let a: Vec<f64> = (0..m.len()).map(|j| (m[j] + l[j].exp() * e[j]).tanh()).collect();
            logp.push(squashed_log_prob(l, e, &a));
            actions.extend(a);
        }
        Ok((Tensor::matrix(n, mu.cols(), actions), Tensor::matrix(n, 1, logp)))
    }

    pub fn sample_noise(rows: usize, action_dim: usize, rng: &mut Rng) -> Tensor {
        Tensor::matrix(
            rows,
            action_dim,
            (0..rows * action_dim).map(|_| StandardNormal.sample(rng)).collect(),
        )
    }

    pub fn sample(&self, x: &Tensor, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        let noise = Self::sample_noise(x.rows(), self.action_dim(), rng);
        self.sample_with_noise(x, &noise)
    }

    /// Mean and clamped log-std on a tape with frozen weights.
    pub fn gaussian_var<'t>(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let out = self.net.forward_frozen(x)?;
        Ok(self.split(out))
    }

    fn split<'t>(&self, out: Var<'t>) -> (Var<'t>, Var<'t>) {
        let d = self.action_dim();
        (
            out.slice_cols(0, d),
            out.slice_cols(d, 2 * d).clamp(LOG_STD_MIN, LOG_STD_MAX),
        )
    }

    /// Reparameterized sample with tracked weights: returns the action, the
    /// per-row log-probability and the parameter handles.
    pub fn rsample_var<'t>(
        &self,
        x: Var<'t>,
        noise: &Tensor,
    ) -> Result<(Var<'t>, Var<'t>, MlpVars<'t>)> {
        let tape = x.tape();
        let (out, vars) = self.net.forward(x)?;
        let (mu, log_std) = self.split(out);
        let eps = tape.constant(noise.clone());
        let action = (mu + log_std.exp() * eps).tanh();
        let gauss = -(log_std + tape.constant(noise.map(|e| 0.5 * e * e + HALF_LOG_2PI)));
        let jac = (-action.square()).add_scalar(1.0 + TANH_EPS).ln();
        let logp = (gauss - jac).sum_cols();
        Ok((action, logp, vars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Dense, Tape};
    use crate::rng::seeded;

    fn zero_policy(state_dim: usize, action_dim: usize) -> GaussianPolicy {
        let layer = Dense {
            weight: Tensor::zeros(state_dim, 2 * action_dim),
            bias: Tensor::zeros(1, 2 * action_dim),
            activation: Activation::Identity,
        };
        GaussianPolicy::from_net(Mlp::from_layers(vec![layer]).unwrap()).unwrap()
    }

    #[test]
    fn standard_normal_at_zero_noise() {
        let p = zero_policy(2, 3);
        let (a, logp) = p
            .sample_with_noise(&Tensor::row(&[0.4, -1.0]), &Tensor::zeros(1, 3))
            .unwrap();
        assert_eq!(a.data(), &[0.0, 0.0, 0.0]);
        let per_dim = -(1.0 + TANH_EPS).ln() - HALF_LOG_2PI;
        assert!((logp.item() - 3.0 * per_dim).abs() < 1e-12);
        assert!((per_dim + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn zero_noise_is_deterministic_action() {
        let p = GaussianPolicy::new(3, 2, 16, &mut seeded(4));
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.5, 0.0, 0.9]);
        let (a, _) = p.sample_with_noise(&x, &Tensor::zeros(2, 2)).unwrap();
        assert!(a.max_abs_diff(&p.deterministic(&x).unwrap()) < 1e-15);
    }

    #[test]
    fn tape_sample_matches_direct_sample() {
        let p = GaussianPolicy::new(3, 2, 16, &mut seeded(5));
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.5, 0.0, 0.9]);
        let noise = GaussianPolicy::sample_noise(2, 2, &mut seeded(6));
        let (a, logp) = p.sample_with_noise(&x, &noise).unwrap();
        let tape = Tape::new();
        let (av, lv, _) = p.rsample_var(tape.constant(x), &noise).unwrap();
        assert!(av.value().max_abs_diff(&a) < 1e-14);
        assert!(lv.value().max_abs_diff(&logp) < 1e-12);
    }

    #[test]
    fn log_std_is_clamped() {
        let mut p = zero_policy(1, 1);
        p.net.layers_mut()[0].bias.data_mut()[1] = 10.0;
        let (_, ls) = p.gaussian(&Tensor::row(&[0.0])).unwrap();
        assert_eq!(ls.item(), LOG_STD_MAX);
        p.net.layers_mut()[0].bias.data_mut()[1] = -50.0;
        let (_, ls) = p.gaussian(&Tensor::row(&[0.0])).unwrap();
        assert_eq!(ls.item(), LOG_STD_MIN);
    }

    #[test]
    fn density_matches_quadrature() {
        // change of variables: p_a(a) = N(atanh a; mu, sigma) / (1 - a^2)
        let (mu, ls) = (0.3f64, -0.2f64);
        let sigma = ls.exp();
        for &a in &[-0.9, -0.3, 0.0, 0.5, 0.95] {
            let e = ((a as f64).atanh() - mu) / sigma;
            let ours = squashed_log_prob(&[ls], &[e], &[a]).exp();
            let exact = (-0.5 * e * e).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
                / (1.0 - a * a);
            assert!((ours - exact).abs() / exact < 1e-4, "{a}: {ours} vs {exact}");
        }
        // and integrates to one over (-1, 1)
        let n = 200_000;
        let h = 2.0 / n as f64;
        let mass: f64 = (0..n)
            .map(|i| {
                let a = -1.0 + (i as f64 + 0.5) * h;
                let e = (a.atanh() - mu) / sigma;
                squashed_log_prob(&[ls], &[e], &[a]).exp() * h
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }
}
