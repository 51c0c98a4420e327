//! Disentangles images into identity, task-relevant ("medical") and residual
//! latent vectors with an adversarially trained autoencoder, and anonymizes
//! images by swapping the identity latent for a synthetic one sampled from a
//! privacy-regularized VAE.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`datasets`]: synthetic factor-labeled data, directory ingestion,
//!   training-triplet sampling.
//! - [`nn`]: the small reverse-mode autodiff engine everything runs on.
//! - [`networks`]: encoder/decoder/classifier/discriminator/VAE definitions
//!   and checkpoint I/O.
//! - [`metrics`]: SSIM, PSNR, entropy and Gaussian KL.
//! - [`losses`]: the disentanglement, classification, realism, adversarial
//!   and privacy objectives.
//! - [`training`]: alternating generator/discriminator optimization and
//!   identity-VAE training.
//! - [`anonymization`]: latent surgery (identity swap, counterfactuals,
//!   identity averaging).
//! - [`evaluation`]: realism/identity/disease evaluation and the ablation
//!   runners.

pub mod anonymization;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod training;

pub use error::{Error, Result};

/// How identity supervision is wired: a multi-class classifier over known
/// patients, or a Siamese embedding compared by distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdentityMode {
    Multiclass,
    Siamese,
}

impl std::fmt::Display for IdentityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IdentityMode::Multiclass => write!(f, "multiclass"),
            IdentityMode::Siamese => write!(f, "siamese"),
        }
    }
}

impl std::str::FromStr for IdentityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(IdentityMode::Multiclass),
            "siamese" => Ok(IdentityMode::Siamese),
            other => Err(Error::config(format!(
                "unknown identity mode '{other}' (expected multiclass|siamese)"
            ))),
        }
    }
}
