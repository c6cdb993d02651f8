//! Learnable feature-space augmentation networks.
//!
//! Both variants take the per-modality fusion-boundary features and return
//! features of identical shapes, plus the encoder KL term against a standard
//! normal. No reconstruction loss exists anywhere.

mod attention_vae;
mod mlp_vae;

use rand::Rng;

pub use attention_vae::{AttentionVae, AttentionVaeConfig};
pub use mlp_vae::{MlpVae, MlpVaeConfig};

use crate::error::{Error, Result};
use crate::gradcore::{Module, ParamSet, Parameter, Tape, Var};
use crate::nn::{Linear, Mode};

/// Initial bias of every log-variance head.
pub(crate) const LOG_VAR_INIT: f64 = -2.0;

/// Mean over the batch of `KL(N(mu, exp(log_var)) || N(0, I))`, summed over
/// every latent coordinate belonging to an example.
///
/// `mu` and `log_var` are `[rows, latent]`; `batch` is the number of examples
/// those rows belong to. `log_var` is clamped to `[-30, 30]` as in sampling.
pub fn gaussian_kl(tape: &mut Tape, mu: Var, log_var: Var, batch: usize) -> Result<Var> {
    if batch == 0 {
        return Err(Error::contract("KL over an empty batch"));
    }
    let lv = tape.clamp(log_var, -30.0, 30.0);
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(lv);
    let a = tape.add(mu2, var)?;
    let a = tape.sub(a, lv)?;
    let a = tape.offset(a, -1.0);
    let total = tape.sum(a);
    Ok(tape.scale(total, 0.5 / batch as f64))
}

pub(crate) fn check_features(tape: &Tape, features: &[Var], dims: &[usize]) -> Result<usize> {
    if features.len() != dims.len() {
        return Err(Error::dim("augmentation inputs", &[features.len()], &[dims.len()]));
    }
    let rows = tape.value(features[0]).rows();
    for (f, &d) in features.iter().zip(dims) {
        let s = tape.value(*f).shape();
        if s.len() != 2 || s[0] != rows || s[1] != d {
            return Err(Error::dim("augmentation input", s, &[rows, d]));
        }
    }
    Ok(rows)
}

/// Linear head producing a log-variance that starts near `LOG_VAR_INIT`.
pub(crate) fn log_var_head<R: Rng + ?Sized>(name: &str, fan_in: usize, latent: usize, rng: &mut R) -> Linear {
    let mut l = Linear::new(name, fan_in, latent, rng);
    for w in l.weight.value.data_mut() {
        *w *= 0.1;
    }
    for b in l.bias.value.data_mut() {
        *b = LOG_VAR_INIT;
    }
    l
}

/// Output of one augmentation pass.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub features: Vec<Var>,
    pub kl: Var,
}

#[derive(Clone, Debug)]
pub enum AugmentationNetwork {
    Mlp(MlpVae),
    Attention(AttentionVae),
}

impl AugmentationNetwork {
    pub fn augment<R: Rng + ?Sized>(&self, tape: &mut Tape, features: &[Var], mode: Mode, rng: &mut R) -> Result<Augmented> {
        match self {
            AugmentationNetwork::Mlp(g) => g.augment(tape, features, mode, rng),
            AugmentationNetwork::Attention(g) => g.augment(tape, features, mode, rng),
        }
    }

    pub fn feature_dims(&self) -> &[usize] {
        match self {
            AugmentationNetwork::Mlp(g) => g.feature_dims(),
            AugmentationNetwork::Attention(g) => g.feature_dims(),
        }
    }
}

impl Module for AugmentationNetwork {
    fn parameters(&self) -> Vec<&Parameter> {
        match self {
            AugmentationNetwork::Mlp(g) => g.parameters(),
            AugmentationNetwork::Attention(g) => g.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            AugmentationNetwork::Mlp(g) => g.parameters_mut(),
            AugmentationNetwork::Attention(g) => g.parameters_mut(),
        }
    }
}

/// Every parameter of the augmentation network, for optimizer registration.
pub fn vae_param_set(g: &impl Module) -> ParamSet {
    g.param_set()
}

#[cfg(test)]
mod tests;
