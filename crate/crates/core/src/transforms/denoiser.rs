//! Autoencoder-style denoisers that map a perturbed state back to its clean
//! version. Trained after the agent, on replay-buffer states perturbed by a
//! policy- or critic-driven attack.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Adam, AdamConfig, Checkpoint, Mlp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserVariant {
    Aed,
    Vaed,
}

impl std::str::FromStr for DenoiserVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aed" => Ok(Self::Aed),
            "vaed" => Ok(Self::Vaed),
            other => Err(Error::Config(format!("unknown denoiser variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub variant: DenoiserVariant,
    pub hidden: usize,
    /// Defaults to the state dimension.
    pub latent_dim: Option<usize>,
    /// Weight of the latent KL term (VAED only).
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Use identity activations throughout (a linear autoencoder).
    pub linear: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            variant: DenoiserVariant::Aed,
            hidden: 128,
            latent_dim: None,
            beta: 1e-4,
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            linear: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub variant: DenoiserVariant,
    pub beta: f64,
    pub latent_dim: usize,
}

impl DenoiserModel {
    pub fn new(state_dim: usize, cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        let latent = cfg.latent_dim.unwrap_or(state_dim);
        let enc_out = match cfg.variant {
            DenoiserVariant::Aed => latent,
            DenoiserVariant::Vaed => 2 * latent,
        };
        let hidden_act = if cfg.linear {
            Activation::Identity
        } else {
            Activation::Relu
        };
        let encoder = Mlp::new(
            &[state_dim, cfg.hidden, enc_out],
            hidden_act,
            Activation::Identity,
            rng,
        );
        let decoder = Mlp::new(
            &[latent, cfg.hidden, state_dim],
            hidden_act,
            Activation::Identity,
            rng,
        );
        Self {
            encoder,
            decoder,
            variant: cfg.variant,
            beta: cfg.beta,
            latent_dim: latent,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    /// `D(E(x))`, using the latent mean for the variational model.
    pub fn denoise_batch(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encoder.predict(x)?;
        let z = match self.variant {
            DenoiserVariant::Aed => z,
            DenoiserVariant::Vaed => {
                let rows: Vec<Vec<f64>> = (0..z.rows())
                    .map(|r| z.row_slice(r)[..self.latent_dim].to_vec())
                    .collect();
                Tensor::from_rows(&rows)
            }
        };
        self.decoder.predict(&z)
    }

    pub fn denoise(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.denoise_batch(&Tensor::row(s))?.into_data())
    }

    /// Differentiable reconstruction with frozen weights, for white-box attacks.
    pub fn denoise_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let z = self.encoder.forward_frozen(x)?;
        let z = match self.variant {
            DenoiserVariant::Aed => z,
            DenoiserVariant::Vaed => z.slice_cols(0, self.latent_dim),
        };
        self.decoder.forward_frozen(z)
    }

    /// Training loss on one minibatch; returns `(loss, encoder vars, decoder vars)`.
    fn loss<'t>(
        &self,
        tape: &'t Tape,
        noisy: &Tensor,
        clean: &Tensor,
        rng: &mut Rng,
    ) -> Result<(Var<'t>, crate::diffcore::MlpVars<'t>, crate::diffcore::MlpVars<'t>)> {
        let x = tape.constant(noisy.clone());
        let (enc, enc_vars) = self.encoder.forward(x)?;
        let (z, kl) = match self.variant {
            DenoiserVariant::Aed => (enc, None),
            DenoiserVariant::Vaed => {
                let l = self.latent_dim;
                let mu = enc.slice_cols(0, l);
                let logvar = enc.slice_cols(l, 2 * l).clamp(-20.0, 10.0);
                let noise = Tensor::matrix(
                    noisy.rows(),
                    l,
                    (0..noisy.rows() * l)
                        .map(|_| StandardNormal.sample(rng))
                        .collect(),
                );
                let std = logvar.scale(0.5).exp();
                let z = mu + std * tape.constant(noise);
                // KL(N(mu, var) || N(0, 1)) per sample
                let kl = (mu.square() + logvar.exp() - logvar)
                    .add_scalar(-1.0)
                    .sum_cols()
                    .scale(0.5)
                    .mean();
                (z, Some(kl))
            }
        };
        let (recon, dec_vars) = self.decoder.forward(z)?;
        let mse = (recon - tape.constant(clean.clone())).square().mean();
        let loss = match kl {
            Some(kl) => mse + kl.scale(self.beta),
            None => mse,
        };
        Ok((loss, enc_vars, dec_vars))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new()
            .with_network("encoder", &self.encoder)
            .with_network("decoder", &self.decoder)
            .with_scalar(
                "variant",
                match self.variant {
                    DenoiserVariant::Aed => 0.0,
                    DenoiserVariant::Vaed => 1.0,
                },
            )
            .with_scalar("beta", self.beta)
            .with_scalar("latent_dim", self.latent_dim as f64)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let variant = if ck.scalar("variant")? == 0.0 {
            DenoiserVariant::Aed
        } else {
            DenoiserVariant::Vaed
        };
        Ok(Self {
            encoder: ck.network("encoder")?.clone(),
            decoder: ck.network("decoder")?.clone(),
            variant,
            beta: ck.scalar("beta")?,
            latent_dim: ck.scalar("latent_dim")? as usize,
        })
    }
}

/// Trains a denoiser to map `perturb(states)` back to `states`. The
/// perturbation is regenerated at the start of every epoch.
pub fn train_denoiser<P>(
    states: &Tensor,
    mut perturb: P,
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<DenoiserModel>
where
    P: FnMut(&Tensor, &mut Rng) -> Result<Tensor>,
{
    if states.rows() == 0 {
        return Err(Error::Contract("denoiser needs training states".into()));
    }
    let mut rng = seeded(seed);
    let mut model = DenoiserModel::new(states.cols(), cfg, &mut rng);
    let mut enc_opt = Adam::for_mlp(AdamConfig::with_lr(cfg.lr), &model.encoder);
    let mut dec_opt = Adam::for_mlp(AdamConfig::with_lr(cfg.lr), &model.decoder);
    let mut order: Vec<usize> = (0..states.rows()).collect();
    for epoch in 0..cfg.epochs {
        let noisy = perturb(states, &mut rng)?;
        if !noisy.same_shape(states) {
            return Err(Error::Shape("perturbation changed the state shape".into()));
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let tape = Tape::new();
            let (loss, ev, dv) = model.loss(
                &tape,
                &noisy.gather_rows(chunk),
                &states.gather_rows(chunk),
                &mut rng,
            )?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("denoiser loss {value} at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            enc_opt.step_mlp(&mut model.encoder, &ev.grads(&grads))?;
            dec_opt.step_mlp(&mut model.decoder, &dv.grads(&grads))?;
            total += value;
            batches += 1;
        }
        log::debug!("denoiser epoch {epoch}: loss {:.6}", total / batches as f64);
    }
    Ok(model)
}

/// Gradient of the training loss with respect to all parameters, flattened
/// (encoder then decoder). Exposed for finite-difference checks.
pub fn denoiser_loss_and_grad(
    model: &DenoiserModel,
    noisy: &Tensor,
    clean: &Tensor,
    noise_seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let mut rng = seeded(noise_seed);
    let (loss, ev, dv) = model.loss(&tape, noisy, clean, &mut rng)?;
    let grads = tape.backward(loss)?;
    let mut g = ev.grads(&grads).flatten();
    g.extend(dv.grads(&grads).flatten());
    Ok((loss.item(), g))
}

/// Loss only, for the same noise seed.
pub fn denoiser_loss(model: &DenoiserModel, noisy: &Tensor, clean: &Tensor, noise_seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let mut rng = seeded(noise_seed);
    Ok(model.loss(&tape, noisy, clean, &mut rng)?.0.item())
}
