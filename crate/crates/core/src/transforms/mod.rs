//! Input transformations placed in front of the policy network.
//!
//! Bit-depth reduction and vector quantization are applied both while the
//! agent trains and at test time. Denoisers are fitted after training and are
//! only active at test time.

mod bdr;
mod codebook;
mod denoiser;

pub use bdr::Bdr;
pub use codebook::{Codebook, CODEBOOK_MAGIC, CODEBOOK_VERSION, DEFAULT_DEAD_AFTER};
pub use denoiser::{
    denoiser_loss, denoiser_loss_and_grad, train_denoiser, DenoiserConfig, DenoiserModel,
    DenoiserVariant,
};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Identity,
    Bdr,
    Vq,
    Aed,
    Vaed,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Bdr => "bdr",
            TransformKind::Vq => "vq",
            TransformKind::Aed => "aed",
            TransformKind::Vaed => "vaed",
        }
    }

    pub fn is_denoiser(self) -> bool {
        matches!(self, TransformKind::Aed | TransformKind::Vaed)
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "none" => Ok(Self::Identity),
            "bdr" => Ok(Self::Bdr),
            "vq" => Ok(Self::Vq),
            "aed" => Ok(Self::Aed),
            "vaed" => Ok(Self::Vaed),
            other => Err(Error::Config(format!("unknown transform `{other}`"))),
        }
    }
}

/// How a non-differentiable quantizer reports its Jacobian when an attack
/// differentiates through it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateGradient {
    /// Identity Jacobian (straight-through).
    #[default]
    StraightThrough,
    /// Zero Jacobian.
    Stop,
}

/// A state transformation as seen by code that evaluates or attacks a policy.
pub trait StateTransform: Send + Sync {
    fn apply(&self, s: &[f64]) -> Vec<f64>;

    fn apply_batch(&self, x: &Tensor) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| self.apply(x.row_slice(r))).collect();
        Tensor::from_rows(&rows)
    }

    /// Differentiable application on a tape.
    fn apply_var<'t>(&self, x: Var<'t>) -> Var<'t>;

    fn label(&self) -> String;
}

/// The concrete transform an agent carries.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Identity,
    Bdr(Bdr),
    Vq(Codebook),
    Denoiser(DenoiserModel),
}

impl Transform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Transform::Identity => TransformKind::Identity,
            Transform::Bdr(_) => TransformKind::Bdr,
            Transform::Vq(_) => TransformKind::Vq,
            Transform::Denoiser(m) => match m.variant {
                DenoiserVariant::Aed => TransformKind::Aed,
                DenoiserVariant::Vaed => TransformKind::Vaed,
            },
        }
    }

    /// Whether the transform is active in `phase`. Denoisers are identity
    /// while the agent trains.
    pub fn active_in(&self, phase: Phase) -> bool {
        match self {
            Transform::Identity => false,
            Transform::Bdr(_) | Transform::Vq(_) => true,
            Transform::Denoiser(_) => phase == Phase::Test,
        }
    }

    pub fn dispatch(&self, s: &[f64], phase: Phase) -> Vec<f64> {
        if self.active_in(phase) {
            self.apply(s)
        } else {
            s.to_vec()
        }
    }

    pub fn dispatch_batch(&self, x: &Tensor, phase: Phase) -> Tensor {
        if self.active_in(phase) {
            self.apply_batch(x)
        } else {
            x.clone()
        }
    }

    pub fn apply_var_with<'t>(&self, x: Var<'t>, surrogate: SurrogateGradient) -> Var<'t> {
        let quantized = |x: Var<'t>| {
            let value = self.apply_batch(&x.value());
            match surrogate {
                SurrogateGradient::StraightThrough => x.straight_through(value),
                SurrogateGradient::Stop => x.tape().constant(value),
            }
        };
        match self {
            Transform::Identity => x,
            Transform::Bdr(_) | Transform::Vq(_) => quantized(x),
            Transform::Denoiser(m) => m
                .denoise_var(x)
                .expect("denoiser input width checked at construction"),
        }
    }

    pub fn codebook_mut(&mut self) -> Option<&mut Codebook> {
        match self {
            Transform::Vq(cb) => Some(cb),
            _ => None,
        }
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        match self {
            Transform::Vq(cb) => Some(cb),
            _ => None,
        }
    }
}

impl StateTransform for Transform {
    fn apply(&self, s: &[f64]) -> Vec<f64> {
        match self {
            Transform::Identity => s.to_vec(),
            Transform::Bdr(b) => b.apply(s),
            Transform::Vq(cb) => cb.quantize(s),
            Transform::Denoiser(m) => m.denoise(s).expect("denoiser input width"),
        }
    }

    fn apply_batch(&self, x: &Tensor) -> Tensor {
        match self {
            Transform::Identity => x.clone(),
            Transform::Bdr(b) => {
                let mut out = x.clone();
                b.apply_in_place(out.data_mut());
                out
            }
            Transform::Vq(cb) => {
                let mut out = x.clone();
                for r in 0..x.rows() {
                    let c = cb.assign(x.row_slice(r)).1;
                    out.row_slice_mut(r).copy_from_slice(c);
                }
                out
            }
            Transform::Denoiser(m) => m.denoise_batch(x).expect("denoiser input width"),
        }
    }

    fn apply_var<'t>(&self, x: Var<'t>) -> Var<'t> {
        self.apply_var_with(x, SurrogateGradient::StraightThrough)
    }

    fn label(&self) -> String {
        self.kind().as_str().to_string()
    }
}

/// Transform selection and hyperparameters (`transform.*` config keys).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub kind: TransformKind,
    /// BDR bin width.
    pub bw: f64,
    /// VQ codebook size.
    pub k: usize,
    /// Attack radius used to generate denoiser training data.
    pub eps: f64,
    /// VAED KL weight.
    pub beta: f64,
    /// Use k-means++ spreading when seeding the codebook.
    pub kmeans_pp: bool,
    pub dead_after: u64,
    pub denoiser_epochs: usize,
    /// Attack that generates denoiser training perturbations.
    pub denoiser_attack: crate::attacks::AttackKind,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            kind: TransformKind::Identity,
            bw: 0.05,
            k: 1024,
            eps: 0.3,
            beta: 1e-4,
            kmeans_pp: false,
            dead_after: DEFAULT_DEAD_AFTER,
            denoiser_epochs: 30,
            denoiser_attack: crate::attacks::AttackKind::MinQ,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TransformKind::Bdr if !(self.bw > 0.0) => {
                Err(Error::Config(format!("transform.bw must be > 0, got {}", self.bw)))
            }
            TransformKind::Vq if self.k == 0 => Err(Error::Config("transform.k must be > 0".into())),
            _ if !self.beta.is_finite() || self.beta < 0.0 => {
                Err(Error::Config("transform.beta must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            TransformKind::Identity => "identity".into(),
            TransformKind::Bdr => format!("bdr(bw={})", self.bw),
            TransformKind::Vq => format!("vq(k={})", self.k),
            TransformKind::Aed => format!("aed(eps={})", self.eps),
            TransformKind::Vaed => format!("vaed(eps={}, beta={})", self.eps, self.beta),
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            variant: if self.kind == TransformKind::Vaed {
                DenoiserVariant::Vaed
            } else {
                DenoiserVariant::Aed
            },
            beta: self.beta,
            epochs: self.denoiser_epochs,
            ..DenoiserConfig::default()
        }
    }
}
