use rand::Rng;

use super::{check_features, gaussian_kl, log_var_head, Augmented};
use crate::error::{Error, Result};
use crate::gradcore::{Module, Parameter, Tape, Var};
use crate::nn::{Linear, Mode, TransformerBlock};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVaeConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
}

impl Default for AttentionVaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            width: 64,
            layers: 4,
            heads: 8,
            ff_width: 128,
            dropout: 0.1,
        }
    }
}

/// VAE that treats each modality feature as one token. Modality identity
/// comes from the per-modality input and output projections.
#[derive(Clone, Debug)]
pub struct AttentionVae {
    dims: Vec<usize>,
    width: usize,
    inputs: Vec<Linear>,
    encoder: Vec<TransformerBlock>,
    mu: Linear,
    log_var: Linear,
    lift: Linear,
    decoder: Vec<TransformerBlock>,
    outputs: Vec<Linear>,
}

impl AttentionVae {
    pub fn new<R: Rng + ?Sized>(feature_dims: &[usize], config: &AttentionVaeConfig, rng: &mut R) -> Result<Self> {
        if feature_dims.is_empty() || feature_dims.contains(&0) {
            return Err(Error::contract("feature widths must be non-empty and positive"));
        }
        let c = config;
        if c.latent_dim == 0
            || c.width == 0
            || c.heads == 0
            || c.width % c.heads != 0
            || c.ff_width == 0
            || !(0.0..1.0).contains(&c.dropout)
        {
            return Err(Error::contract(format!("invalid attention VAE config {c:?}")));
        }
        let block = |name: String, rng: &mut R| TransformerBlock::new(&name, c.width, c.heads, c.ff_width, c.dropout, rng);
        Ok(Self {
            dims: feature_dims.to_vec(),
            width: c.width,
            inputs: feature_dims
                .iter()
                .enumerate()
                .map(|(i, &d)| Linear::new(&format!("avae.in{i}"), d, c.width, rng))
                .collect(),
            encoder: (0..c.layers).map(|i| block(format!("avae.enc{i}"), rng)).collect(),
            mu: Linear::new("avae.mu", c.width, c.latent_dim, rng),
            log_var: log_var_head("avae.log_var", c.width, c.latent_dim, rng),
            lift: Linear::new("avae.lift", c.latent_dim, c.width, rng),
            decoder: (0..c.layers).map(|i| block(format!("avae.dec{i}"), rng)).collect(),
            outputs: feature_dims
                .iter()
                .enumerate()
                .map(|(i, &d)| Linear::new(&format!("avae.out{i}"), c.width, d, rng))
                .collect(),
        })
    }

    pub fn feature_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn augment<R: Rng + ?Sized>(&self, tape: &mut Tape, features: &[Var], mode: Mode, rng: &mut R) -> Result<Augmented> {
        let b = check_features(tape, features, &self.dims)?;
        let n = self.dims.len();
        let mut tokens = Vec::with_capacity(n);
        for (f, proj) in features.iter().zip(&self.inputs) {
            tokens.push(proj.forward(tape, *f)?);
        }
        // [b, n*width] -> [b*n, width]: each example's tokens become contiguous rows
        let wide = tape.concat_cols(&tokens)?;
        let mut h = tape.reshape(wide, &[b * n, self.width])?;
        for blk in &self.encoder {
            h = blk.forward(tape, h, n, mode, rng)?;
        }
        let mu = self.mu.forward(tape, h)?;
        let lv = self.log_var.forward(tape, h)?;
        let kl = gaussian_kl(tape, mu, lv, b)?;
        let code = match mode {
            Mode::Train => tape.gaussian_sample(mu, lv, rng)?,
            Mode::Eval => mu,
        };
        let mut d = self.lift.forward(tape, code)?;
        for blk in &self.decoder {
            d = blk.forward(tape, d, n, mode, rng)?;
        }
        let wide = tape.reshape(d, &[b, n * self.width])?;
        let mut out = Vec::with_capacity(n);
        for (i, proj) in self.outputs.iter().enumerate() {
            let tok = tape.slice_cols(wide, i * self.width, self.width)?;
            out.push(proj.forward(tape, tok)?);
        }
        Ok(Augmented { features: out, kl })
    }
}

impl Module for AttentionVae {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.inputs.iter().flat_map(|l| l.parameters()).collect();
        v.extend(self.encoder.iter().flat_map(|b| b.parameters()));
        v.extend(self.mu.parameters());
        v.extend(self.log_var.parameters());
        v.extend(self.lift.parameters());
        v.extend(self.decoder.iter().flat_map(|b| b.parameters()));
        v.extend(self.outputs.iter().flat_map(|l| l.parameters()));
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = self.inputs.iter_mut().flat_map(|l| l.parameters_mut()).collect();
        v.extend(self.encoder.iter_mut().flat_map(|b| b.parameters_mut()));
        v.extend(self.mu.parameters_mut());
        v.extend(self.log_var.parameters_mut());
        v.extend(self.lift.parameters_mut());
        v.extend(self.decoder.iter_mut().flat_map(|b| b.parameters_mut()));
        v.extend(self.outputs.iter_mut().flat_map(|l| l.parameters_mut()));
        v
    }
}
