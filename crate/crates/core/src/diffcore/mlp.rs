//! Multilayer perceptrons over the tape.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    fn apply_var(self, v: Var<'_>) -> Var<'_> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }
}

/// One affine layer followed by an activation. `weight` is `[in, out]`,
/// `bias` is `[1, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Per-layer `(weight, bias)` gradients, aligned with [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.in_dim(), l.out_dim()),
                        Tensor::zeros(1, l.out_dim()),
                    )
                })
                .collect(),
        }
    }

    /// Adds `other` elementwise (for losses that run the network twice).
    pub fn accumulate(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.data_mut().iter_mut().zip(ow.data()).for_each(|(x, y)| *x += y);
            b.data_mut().iter_mut().zip(ob.data()).for_each(|(x, y)| *x += y);
        }
    }

    /// All gradient entries, flattened layer by layer (weight then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }
}

/// Parameter leaves registered on a tape by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpVars<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl MlpVars<'_> {
    pub fn grads(&self, grads: &Gradients) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| (grads.wrt(w), grads.wrt(b)))
                .collect(),
        }
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("an MLP needs at least one layer".into()));
        }
        for l in &layers {
            if l.bias.rows() != 1 || l.bias.cols() != l.out_dim() {
                return Err(Error::Shape(format!(
                    "bias {:?} does not match weight {:?}",
                    l.bias.shape(),
                    l.weight.shape()
                )));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))` for
    /// weights and biases. `sizes` lists every width including input and
    /// output; hidden layers use `hidden`, the last layer `output`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
                Dense {
                    weight: Tensor::matrix(fan_in, fan_out, w),
                    bias: Tensor::matrix(1, fan_out, b),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Scales the last layer's weights and bias, e.g. to start a head near zero.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.data_mut().iter_mut().for_each(|v| *v *= factor);
        last.bias.data_mut().iter_mut().for_each(|v| *v *= factor);
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(Error::Shape(format!(
                "input width {cols} but network expects {}",
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Inference without a tape.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.cols())?;
        let rows = input.rows();
        let mut x = input.data().to_vec();
        for l in &self.layers {
            let (k, c) = (l.in_dim(), l.out_dim());
            let mut y = matmul(&x, l.weight.data(), rows, k, c);
            let b = l.bias.data();
            for row in y.chunks_mut(c) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v = l.activation.apply(*v + bv);
                }
            }
            x = y;
        }
        Ok(Tensor::matrix(rows, self.out_dim(), x))
    }

    /// Forward on a tape, registering every weight and bias as a tracked leaf.
    pub fn forward<'t>(&self, input: Var<'t>) -> Result<(Var<'t>, MlpVars<'t>)> {
        self.forward_impl(input, true)
    }

    /// Forward on a tape with the parameters held constant. Gradients still
    /// flow to `input`.
    pub fn forward_frozen<'t>(&self, input: Var<'t>) -> Result<Var<'t>> {
        self.forward_impl(input, false).map(|(v, _)| v)
    }

    fn forward_impl<'t>(&self, input: Var<'t>, track: bool) -> Result<(Var<'t>, MlpVars<'t>)> {
        self.check_input(input.dims().1)?;
        let tape: &'t Tape = input.tape();
        let mut x = input;
        let mut vars = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (w, b) = if track {
                (tape.var(l.weight.clone()), tape.var(l.bias.clone()))
            } else {
                (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
            };
            x = l.activation.apply_var(x.matmul(w) + b);
            vars.push((w, b));
        }
        Ok((x, MlpVars { layers: vars }))
    }

    /// All parameters flattened layer by layer (weight then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Inverse of [`Mlp::flatten`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// `self = tau * online + (1 - tau) * self`, elementwise.
    pub fn ema_from(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            for (tv, ov) in t.weight.data_mut().iter_mut().zip(o.weight.data()) {
                *tv = tau * ov + (1.0 - tau) * *tv;
            }
            for (tv, ov) in t.bias.data_mut().iter_mut().zip(o.bias.data()) {
                *tv = tau * ov + (1.0 - tau) * *tv;
            }
        }
    }

    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.activation == b.activation
            })
    }
}
