//! Learned multimodal data augmentation in feature space.
//!
//! A late-fusion task network is split at its fusion boundary; a VAE
//! augmentation network rewrites the per-modality features and is trained
//! adversarially against the task loss, with a confidence-masked consistency
//! penalty keeping augmentations label-preserving.

pub mod augnet;
pub mod baselines;
pub mod batch;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod fusionnet;
pub mod gradcore;
pub mod nn;
pub mod rng;
pub mod trainer;

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

pub use error::{Error, Result};
