//! Late-fusion classifier split at the fusion boundary.
//!
//! `forward_before` runs one encoder per modality and returns the features
//! `z_i`; `forward_after` concatenates them in spec order and applies the
//! fusion head. Composing the two is exactly `forward`.

use rand::Rng;

use crate::batch::{ModalityData, MultimodalBatch};
use crate::error::{Error, Result};
use crate::gradcore::{softmax_rows, Module, Parameter, Tape, Tensor, Var};
use crate::nn::{Activation, Mlp, Mode};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModalityKind {
    Continuous { dim: usize },
    Tokens { vocab_size: usize, max_len: usize },
    Categorical { cardinalities: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    /// Output width of this modality's encoder.
    pub feature_dim: usize,
}

impl ModalitySpec {
    pub fn continuous(name: impl Into<String>, dim: usize, feature_dim: usize) -> Self {
        Self {
            name: name.into(),
            kind: ModalityKind::Continuous { dim },
            feature_dim,
        }
    }

    pub fn tokens(name: impl Into<String>, vocab_size: usize, max_len: usize, feature_dim: usize) -> Self {
        Self {
            name: name.into(),
            kind: ModalityKind::Tokens { vocab_size, max_len },
            feature_dim,
        }
    }

    pub fn categorical(name: impl Into<String>, cardinalities: Vec<usize>, feature_dim: usize) -> Self {
        Self {
            name: name.into(),
            kind: ModalityKind::Categorical { cardinalities },
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.feature_dim > 0
            && match &self.kind {
                ModalityKind::Continuous { dim } => *dim > 0,
                ModalityKind::Tokens { vocab_size, max_len } => *vocab_size > 0 && *max_len > 0,
                ModalityKind::Categorical { cardinalities } => {
                    !cardinalities.is_empty() && cardinalities.iter().all(|&c| c > 0)
                }
            };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("modality `{}` has a zero-sized dimension", self.name)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub specs: Vec<ModalitySpec>,
    pub num_classes: usize,
    pub encoder_hidden: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
}

impl NetworkConfig {
    pub fn new(specs: Vec<ModalitySpec>, num_classes: usize) -> Self {
        Self {
            specs,
            num_classes,
            encoder_hidden: 64,
            embed_dim: 16,
            head_hidden: 64,
            head_dropout: 0.0,
        }
    }

    pub fn fused_width(&self) -> usize {
        self.specs.iter().map(|s| s.feature_dim).sum()
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Continuous(Mlp),
    Tokens { embedding: Parameter, mlp: Mlp },
    Categorical { mlp: Mlp, offsets: Vec<usize>, width: usize },
}

impl Encoder {
    fn params(&self) -> Vec<&Parameter> {
        match self {
            Encoder::Continuous(mlp) | Encoder::Categorical { mlp, .. } => mlp.parameters(),
            Encoder::Tokens { embedding, mlp } => {
                let mut v = vec![embedding];
                v.extend(mlp.parameters());
                v
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Encoder::Continuous(mlp) | Encoder::Categorical { mlp, .. } => mlp.parameters_mut(),
            Encoder::Tokens { embedding, mlp } => {
                let mut v = vec![embedding];
                v.extend(mlp.parameters_mut());
                v
            }
        }
    }
}

/// Per-modality encoders followed by a concatenation-fusion MLP head.
#[derive(Clone, Debug)]
pub struct TaskNetwork {
    config: NetworkConfig,
    encoders: Vec<Encoder>,
    head: Mlp,
}

impl TaskNetwork {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        if config.specs.is_empty() {
            return Err(Error::contract("a task network needs at least one modality"));
        }
        if config.num_classes < 2 {
            return Err(Error::contract(format!("num_classes must be >= 2, got {}", config.num_classes)));
        }
        if config.encoder_hidden == 0 || config.embed_dim == 0 || config.head_hidden == 0 {
            return Err(Error::contract("network widths must be positive"));
        }
        if !(0.0..1.0).contains(&config.head_dropout) {
            return Err(Error::contract(format!("head dropout {} outside [0, 1)", config.head_dropout)));
        }
        let mut encoders = Vec::with_capacity(config.specs.len());
        for spec in &config.specs {
            spec.validate()?;
            let name = format!("enc.{}", spec.name);
            let h = config.encoder_hidden;
            let enc = match &spec.kind {
                ModalityKind::Continuous { dim } => {
                    Encoder::Continuous(Mlp::new(&name, &[*dim, h, spec.feature_dim], Activation::Relu, rng))
                }
                ModalityKind::Tokens { vocab_size, .. } => {
                    let e = config.embed_dim;
                    let data = (0..vocab_size * e).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Encoder::Tokens {
                        embedding: Parameter::new(format!("{name}.embedding"), Tensor::new(vec![*vocab_size, e], data)?),
                        mlp: Mlp::new(&name, &[e, h, spec.feature_dim], Activation::Relu, rng),
                    }
                }
                ModalityKind::Categorical { cardinalities } => {
                    let mut offsets = Vec::with_capacity(cardinalities.len());
                    let mut width = 0;
                    for &c in cardinalities {
                        offsets.push(width);
                        width += c;
                    }
                    Encoder::Categorical {
                        mlp: Mlp::new(&name, &[width, h, spec.feature_dim], Activation::Relu, rng),
                        offsets,
                        width,
                    }
                }
            };
            encoders.push(enc);
        }
        let head = Mlp::new(
            "head",
            &[config.fused_width(), config.head_hidden, config.num_classes],
            Activation::Relu,
            rng,
        )
        .with_dropout(config.head_dropout);
        Ok(Self { config, encoders, head })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.config.specs
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.config.specs.iter().map(|s| s.feature_dim).collect()
    }

    /// Encodes each modality into its fusion-boundary feature `[b, feature_dim]`.
    pub fn forward_before(&self, tape: &mut Tape, batch: &MultimodalBatch) -> Result<Vec<Var>> {
        batch.validate(&self.config.specs)?;
        let b = batch.len();
        let mut out = Vec::with_capacity(self.encoders.len());
        for (enc, data) in self.encoders.iter().zip(&batch.modalities) {
            let z = match (enc, data) {
                (Encoder::Continuous(mlp), ModalityData::Continuous(x)) => {
                    let x = tape.constant(x.clone());
                    mlp.forward(tape, x)?
                }
                (Encoder::Tokens { embedding, mlp }, ModalityData::Tokens(seqs)) => {
                    let table = tape.param(embedding);
                    let pooled = tape.embedding_mean(table, seqs)?;
                    mlp.forward(tape, pooled)?
                }
                (Encoder::Categorical { mlp, offsets, width }, ModalityData::Categorical(rows)) => {
                    let mut onehot = vec![0.0; b * width];
                    for (i, row) in rows.iter().enumerate() {
                        for (&code, &off) in row.iter().zip(offsets) {
                            onehot[i * width + off + code] = 1.0;
                        }
                    }
                    let x = tape.constant(Tensor::new(vec![b, *width], onehot)?);
                    mlp.forward(tape, x)?
                }
                _ => unreachable!("batch validated against specs"),
            };
            out.push(z);
        }
        Ok(out)
    }

    /// Fuses features by concatenation in spec order and returns logits.
    pub fn forward_after<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        features: &[Var],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if features.len() != self.encoders.len() {
            return Err(Error::dim("fusion inputs", &[features.len()], &[self.encoders.len()]));
        }
        let rows = tape.value(features[0]).rows();
        for (f, spec) in features.iter().zip(&self.config.specs) {
            let shape = tape.value(*f).shape();
            if shape.len() != 2 || shape[0] != rows || shape[1] != spec.feature_dim {
                return Err(Error::dim("fusion input", shape, &[rows, spec.feature_dim]));
            }
        }
        let fused = tape.concat_cols(features)?;
        self.head.forward_mode(tape, fused, mode, rng)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &MultimodalBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let z = self.forward_before(tape, batch)?;
        self.forward_after(tape, &z, mode, rng)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, batch: &MultimodalBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = crate::rng::seeded(0);
        let y = self.forward(&mut tape, batch, Mode::Eval, &mut rng)?;
        Ok(tape.value(y).clone())
    }

    /// Eval-mode class probabilities.
    pub fn probabilities(&self, batch: &MultimodalBatch) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(batch)?))
    }

    /// Argmax class (lowest index on ties) and its probability per row.
    pub fn predict(&self, batch: &MultimodalBatch) -> Result<(Vec<usize>, Vec<f64>)> {
        Ok(predict_from_logits(&self.logits(batch)?))
    }
}

/// Argmax label and max softmax probability for each row of `logits`.
pub fn predict_from_logits(logits: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let probs = softmax_rows(logits);
    let labels = probs.argmax_rows();
    let conf = labels.iter().enumerate().map(|(i, &l)| probs.at(i, l)).collect();
    (labels, conf)
}

impl Module for TaskNetwork {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.encoders.iter().flat_map(|e| e.params()).collect();
        v.extend(self.head.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = self.encoders.iter_mut().flat_map(|e| e.params_mut()).collect();
        v.extend(self.head.parameters_mut());
        v
    }
}
