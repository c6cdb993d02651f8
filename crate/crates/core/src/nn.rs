//! Layers shared by the task and augmentation networks.

use rand::Rng;

use crate::error::Result;
use crate::gradcore::{Module, Parameter, Tape, Tensor, Var};

/// Train-time behaviour (dropout, sampling) versus deterministic evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("init shape")
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), uniform_init(&[fan_in, fan_out], fan_in, rng)),
            bias: Parameter::new(format!("{name}.bias"), uniform_init(&[fan_out], fan_in, rng)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Inverted dropout: scales kept units by `1 / (1 - p)` in train mode and is
/// the identity in eval mode.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    if mode == Mode::Eval || p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

/// Stack of linear layers with an activation between consecutive layers and
/// none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`.
    pub fn new<R: Rng + ?Sized>(name: &str, widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs an input and output width");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activation,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().expect("non-empty").out_features()
    }

    /// Deterministic forward pass (dropout off).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        // eval mode never draws from the rng
        let mut rng = crate::rng::seeded(0);
        self.forward_mode(tape, x, Mode::Eval, &mut rng)
    }

    pub fn forward_mode<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = self.activation.apply(tape, h);
                h = dropout(tape, h, self.dropout, mode, rng)?;
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }
}

/// Layer normalization over the last dimension with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub shift: Parameter,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            gain: Parameter::new(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            shift: Parameter::new(format!("{name}.shift"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, 1e-5);
        let g = tape.param(&self.gain);
        let b = tape.param(&self.shift);
        let scaled = tape.mul(n, g)?;
        tape.add(scaled, b)
    }
}

impl Module for LayerNorm {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.gain, &self.shift]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gain, &mut self.shift]
    }
}

/// Post-norm transformer encoder layer: self-attention then a relu
/// feed-forward block, each wrapped in residual + layer norm.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, heads: usize, ff_width: usize, dropout: f64, rng: &mut R) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            query: Linear::new(&format!("{name}.query"), width, width, rng),
            key: Linear::new(&format!("{name}.key"), width, width, rng),
            value: Linear::new(&format!("{name}.value"), width, width, rng),
            out: Linear::new(&format!("{name}.out"), width, width, rng),
            norm1: LayerNorm::new(&format!("{name}.norm1"), width),
            ff1: Linear::new(&format!("{name}.ff1"), width, ff_width, rng),
            ff2: Linear::new(&format!("{name}.ff2"), ff_width, width, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), width),
            heads,
            dropout,
        }
    }

    /// `x` is `[groups * tokens, width]` with each group's tokens contiguous.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, tokens: usize, mode: Mode, rng: &mut R) -> Result<Var> {
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let a = tape.attention(q, k, v, tokens, self.heads)?;
        let a = self.out.forward(tape, a)?;
        let a = dropout(tape, a, self.dropout, mode, rng)?;
        let h = tape.add(x, a)?;
        let h = self.norm1.forward(tape, h)?;

        let f = self.ff1.forward(tape, h)?;
        let f = tape.relu(f);
        let f = dropout(tape, f, self.dropout, mode, rng)?;
        let f = self.ff2.forward(tape, f)?;
        let f = dropout(tape, f, self.dropout, mode, rng)?;
        let h2 = tape.add(h, f)?;
        self.norm2.forward(tape, h2)
    }
}

impl Module for TransformerBlock {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for l in [&self.query, &self.key, &self.value, &self.out] {
            v.extend(l.parameters());
        }
        v.extend(self.norm1.parameters());
        v.extend(self.ff1.parameters());
        v.extend(self.ff2.parameters());
        v.extend(self.norm2.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        v.extend(self.query.parameters_mut());
        v.extend(self.key.parameters_mut());
        v.extend(self.value.parameters_mut());
        v.extend(self.out.parameters_mut());
        v.extend(self.norm1.parameters_mut());
        v.extend(self.ff1.parameters_mut());
        v.extend(self.ff2.parameters_mut());
        v.extend(self.norm2.parameters_mut());
        v
    }
}
