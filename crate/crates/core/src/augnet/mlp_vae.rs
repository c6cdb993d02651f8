use rand::Rng;

use super::{check_features, gaussian_kl, log_var_head, Augmented};
use crate::error::{Error, Result};
use crate::gradcore::{Module, Parameter, Tape, Var};
use crate::nn::{dropout, Linear, Mode};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpVaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for MlpVaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: 64,
            dropout: 0.5,
        }
    }
}

/// VAE over the concatenated features. The decoded vector is split back into
/// modalities in input order.
#[derive(Clone, Debug)]
pub struct MlpVae {
    dims: Vec<usize>,
    dropout: f64,
    enc: Linear,
    mu: Linear,
    log_var: Linear,
    dec_hidden: Linear,
    dec_out: Linear,
}

impl MlpVae {
    pub fn new<R: Rng + ?Sized>(feature_dims: &[usize], config: &MlpVaeConfig, rng: &mut R) -> Result<Self> {
        if feature_dims.is_empty() || feature_dims.contains(&0) {
            return Err(Error::contract("feature widths must be non-empty and positive"));
        }
        if config.latent_dim == 0 || config.hidden == 0 || !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::contract(format!("invalid MLP-VAE config {config:?}")));
        }
        let total: usize = feature_dims.iter().sum();
        let (h, l) = (config.hidden, config.latent_dim);
        Ok(Self {
            dims: feature_dims.to_vec(),
            dropout: config.dropout,
            enc: Linear::new("vae.enc", total, h, rng),
            mu: Linear::new("vae.mu", h, l, rng),
            log_var: log_var_head("vae.log_var", h, l, rng),
            dec_hidden: Linear::new("vae.dec0", l, h, rng),
            dec_out: Linear::new("vae.dec1", h, total, rng),
        })
    }

    pub fn feature_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.out_features()
    }

    /// In eval mode the latent code is `mu` and dropout is off.
    pub fn augment<R: Rng + ?Sized>(&self, tape: &mut Tape, features: &[Var], mode: Mode, rng: &mut R) -> Result<Augmented> {
        let b = check_features(tape, features, &self.dims)?;
        let x = tape.concat_cols(features)?;
        let h = self.enc.forward(tape, x)?;
        let h = tape.relu(h);
        let h = dropout(tape, h, self.dropout, mode, rng)?;
        let mu = self.mu.forward(tape, h)?;
        let lv = self.log_var.forward(tape, h)?;
        let kl = gaussian_kl(tape, mu, lv, b)?;
        let code = match mode {
            Mode::Train => tape.gaussian_sample(mu, lv, rng)?,
            Mode::Eval => mu,
        };
        let d = self.dec_hidden.forward(tape, code)?;
        let d = tape.relu(d);
        let d = dropout(tape, d, self.dropout, mode, rng)?;
        let out = self.dec_out.forward(tape, d)?;
        let mut start = 0;
        let mut parts = Vec::with_capacity(self.dims.len());
        for &w in &self.dims {
            parts.push(tape.slice_cols(out, start, w)?);
            start += w;
        }
        Ok(Augmented { features: parts, kl })
    }
}

impl Module for MlpVae {
    fn parameters(&self) -> Vec<&Parameter> {
        [&self.enc, &self.mu, &self.log_var, &self.dec_hidden, &self.dec_out]
            .into_iter()
            .flat_map(|l| l.parameters())
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        v.extend(self.enc.parameters_mut());
        v.extend(self.mu.parameters_mut());
        v.extend(self.log_var.parameters_mut());
        v.extend(self.dec_hidden.parameters_mut());
        v.extend(self.dec_out.parameters_mut());
        v
    }
}
