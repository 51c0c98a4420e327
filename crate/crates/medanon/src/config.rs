//! Run configuration: named presets, the TOML config file, and the
//! flag > file > preset > built-in default resolution order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::NetworkConfig;
use crate::training::TrainConfig;
use crate::IdentityMode;

/// Named hyperparameter presets. The three dataset presets carry the
/// published loss weights, identity-mode assignment and full-scale epoch
/// counts; `toy` is the desk-scale configuration used by the synthetic-data
/// experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Chest,
    Face,
    Iris,
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chest" => Ok(Preset::Chest),
            "face" => Ok(Preset::Face),
            "iris" => Ok(Preset::Iris),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected chest|face|iris|toy)"
            ))),
        }
    }
}

impl Preset {
    pub fn apply(&self, net: &mut NetworkConfig, train: &mut TrainConfig) {
        match self {
            Preset::Chest => {
                train.mode = IdentityMode::Siamese;
                net.identity_mode = IdentityMode::Siamese;
                train.weights.lambda_med = 5.0;
                train.weights.lambda_id = 5.0;
                train.weights.lambda_r = 1.0;
                train.weights.lambda_d = 5.0;
                train.epochs = 1551;
                train.vae_epochs = 223;
                // laterality matters for chest-like data
                train.augmentation.flip_probability = 0.0;
            }
            Preset::Face => {
                train.mode = IdentityMode::Siamese;
                net.identity_mode = IdentityMode::Siamese;
                train.weights.lambda_med = 0.5;
                train.weights.lambda_id = 10.0;
                train.weights.lambda_r = 0.02;
                train.weights.lambda_d = 10.0;
                train.epochs = 1644;
                train.vae_epochs = 135;
            }
            Preset::Iris => {
                train.mode = IdentityMode::Multiclass;
                net.identity_mode = IdentityMode::Multiclass;
                train.weights.lambda_med = 1.0;
                train.weights.lambda_id = 1.0;
                train.weights.lambda_r = 0.1;
                train.weights.lambda_d = 5.0;
                train.epochs = 4635;
                train.vae_epochs = 803;
            }
            Preset::Toy => {
                train.mode = IdentityMode::Siamese;
                net.identity_mode = IdentityMode::Siamese;
                train.weights.lambda_med = 5.0;
                train.weights.lambda_id = 5.0;
                train.weights.lambda_r = 1.0;
                train.weights.lambda_d = 5.0;
                train.epochs = 40;
                train.vae_epochs = 300;
                train.learning_rate = 1e-3;
                train.batch_size = 16;
                net.base_width = 8;
                net.disc_width = 8;
                net.image_size = 32;
            }
        }
    }
}

/// Optional keys of the TOML config file; anything absent falls back to the
/// preset or built-in default.
#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub network: NetworkFileConfig,
    #[serde(default)]
    pub train: TrainFileConfig,
    #[serde(default)]
    pub weights: WeightsFileConfig,
    #[serde(default)]
    pub augmentation: AugmentFileConfig,
}

#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFileConfig {
    pub image_size: Option<usize>,
    pub channels: Option<usize>,
    pub d_id: Option<usize>,
    pub d_med: Option<usize>,
    pub d_rest: Option<usize>,
    pub stages: Option<usize>,
    pub base_width: Option<usize>,
    pub disc_width: Option<usize>,
    pub head_hidden: Option<usize>,
    pub dropout: Option<f64>,
    pub vae_latent: Option<usize>,
    pub vae_hidden: Option<usize>,
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub mode: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub validation_every: Option<usize>,
    pub freeze_classifiers: Option<bool>,
    pub sequential: Option<bool>,
    pub vae_epochs: Option<usize>,
    pub vae_batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFileConfig {
    pub lambda_med: Option<f64>,
    pub lambda_id: Option<f64>,
    pub lambda_r: Option<f64>,
    pub lambda_d: Option<f64>,
    pub alpha: Option<f64>,
    pub margin: Option<f64>,
    pub threshold_t: Option<f64>,
}

#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentFileConfig {
    pub crop_probability: Option<f64>,
    pub crop_fraction: Option<f64>,
    pub brightness_probability: Option<f64>,
    pub brightness_delta: Option<f64>,
    pub flip_probability: Option<f64>,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("bad config file: {e}")))
}

/// CLI-level overrides; every key of the training configuration has a flag.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<IdentityMode>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub validation_every: Option<usize>,
    pub freeze_classifiers: Option<bool>,
    pub sequential: Option<bool>,
    pub vae_epochs: Option<usize>,
    pub vae_batch_size: Option<usize>,
    pub lambda_med: Option<f64>,
    pub lambda_id: Option<f64>,
    pub lambda_r: Option<f64>,
    pub lambda_d: Option<f64>,
    pub alpha: Option<f64>,
    pub margin: Option<f64>,
    pub threshold_t: Option<f64>,
    pub image_size: Option<usize>,
    pub channels: Option<usize>,
    pub d_id: Option<usize>,
    pub d_med: Option<usize>,
    pub d_rest: Option<usize>,
    pub stages: Option<usize>,
    pub base_width: Option<usize>,
    pub disc_width: Option<usize>,
    pub dropout: Option<f64>,
    pub vae_latent: Option<usize>,
    pub vae_hidden: Option<usize>,
    pub init_seed: Option<u64>,
    pub flip_probability: Option<f64>,
    pub crop_probability: Option<f64>,
    pub crop_fraction: Option<f64>,
    pub brightness_probability: Option<f64>,
    pub brightness_delta: Option<f64>,
}

macro_rules! take {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

/// Resolves the effective configuration: built-in defaults, then preset, then
/// config file, then flags.
pub fn resolve(
    preset: Option<Preset>,
    file: Option<&FileConfig>,
    flags: &Overrides,
) -> Result<(NetworkConfig, TrainConfig)> {
    let mut net = NetworkConfig::default();
    let mut train = TrainConfig::default();

    if let Some(p) = preset {
        p.apply(&mut net, &mut train);
    }

    if let Some(f) = file {
        take!(net.image_size, f.network.image_size);
        take!(net.channels, f.network.channels);
        take!(net.d_id, f.network.d_id);
        take!(net.d_med, f.network.d_med);
        take!(net.d_rest, f.network.d_rest);
        take!(net.stages, f.network.stages);
        take!(net.base_width, f.network.base_width);
        take!(net.disc_width, f.network.disc_width);
        take!(net.head_hidden, f.network.head_hidden);
        take!(net.dropout, f.network.dropout);
        take!(net.vae_latent, f.network.vae_latent);
        take!(net.vae_hidden, f.network.vae_hidden);
        take!(net.init_seed, f.network.init_seed);
        if let Some(mode) = &f.train.mode {
            train.mode = mode.parse()?;
            net.identity_mode = train.mode;
        }
        take!(train.epochs, f.train.epochs);
        take!(train.batch_size, f.train.batch_size);
        take!(train.learning_rate, f.train.learning_rate);
        take!(train.seed, f.train.seed);
        take!(train.validation_every, f.train.validation_every);
        take!(train.freeze_classifiers, f.train.freeze_classifiers);
        if f.train.sequential == Some(true) {
            train.parallelism = crate::nn::Parallelism::Sequential;
        }
        take!(train.vae_epochs, f.train.vae_epochs);
        take!(train.vae_batch_size, f.train.vae_batch_size);
        take!(train.weights.lambda_med, f.weights.lambda_med);
        take!(train.weights.lambda_id, f.weights.lambda_id);
        take!(train.weights.lambda_r, f.weights.lambda_r);
        take!(train.weights.lambda_d, f.weights.lambda_d);
        take!(train.weights.alpha, f.weights.alpha);
        take!(train.weights.margin, f.weights.margin);
        take!(train.weights.threshold_t, f.weights.threshold_t);
        take!(train.augmentation.crop_probability, f.augmentation.crop_probability);
        take!(train.augmentation.crop_fraction, f.augmentation.crop_fraction);
        take!(train.augmentation.brightness_probability, f.augmentation.brightness_probability);
        take!(train.augmentation.brightness_delta, f.augmentation.brightness_delta);
        take!(train.augmentation.flip_probability, f.augmentation.flip_probability);
    }

    if let Some(mode) = flags.mode {
        train.mode = mode;
        net.identity_mode = mode;
    }
    take!(train.epochs, flags.epochs);
    take!(train.batch_size, flags.batch_size);
    take!(train.learning_rate, flags.learning_rate);
    take!(train.seed, flags.seed);
    take!(train.validation_every, flags.validation_every);
    take!(train.freeze_classifiers, flags.freeze_classifiers);
    if flags.sequential == Some(true) {
        train.parallelism = crate::nn::Parallelism::Sequential;
    }
    take!(train.vae_epochs, flags.vae_epochs);
    take!(train.vae_batch_size, flags.vae_batch_size);
    take!(train.weights.lambda_med, flags.lambda_med);
    take!(train.weights.lambda_id, flags.lambda_id);
    take!(train.weights.lambda_r, flags.lambda_r);
    take!(train.weights.lambda_d, flags.lambda_d);
    take!(train.weights.alpha, flags.alpha);
    take!(train.weights.margin, flags.margin);
    take!(train.weights.threshold_t, flags.threshold_t);
    take!(net.image_size, flags.image_size);
    take!(net.channels, flags.channels);
    take!(net.d_id, flags.d_id);
    take!(net.d_med, flags.d_med);
    take!(net.d_rest, flags.d_rest);
    take!(net.stages, flags.stages);
    take!(net.base_width, flags.base_width);
    take!(net.disc_width, flags.disc_width);
    take!(net.dropout, flags.dropout);
    take!(net.vae_latent, flags.vae_latent);
    take!(net.vae_hidden, flags.vae_hidden);
    take!(net.init_seed, flags.init_seed);
    take!(train.augmentation.flip_probability, flags.flip_probability);
    take!(train.augmentation.crop_probability, flags.crop_probability);
    take!(train.augmentation.crop_fraction, flags.crop_fraction);
    take!(train.augmentation.brightness_probability, flags.brightness_probability);
    take!(train.augmentation.brightness_delta, flags.brightness_delta);

    train.metrics.psnr_cap = train.weights.alpha;
    train.weights.validate()?;
    train.augmentation.validate()?;
    Ok((net, train))
}
