//! Ablation runners: the realism-loss variants and the dataset-size sweep.
//! Every variant trains under an identical epoch budget and is scored by
//! reconstruction SSIM (realism) or the full metric triple (data size).

use std::path::Path;

use crate::datasets::{DatasetSplit, LabeledSample};
use crate::error::{Error, Result};
use crate::evaluation::{run_report, EvalConfig, Experiment};
use crate::networks::checkpoint::{self, param_hash};
use crate::networks::NetworkConfig;
use crate::nn::Element;
use crate::training::{train_disentangler_from, LossFlags, TrainConfig};

/// The six realism-loss variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealismVariant {
    OnlySsim,
    OnlyPsnr,
    SsimPsnr,
    GanSsimPsnr,
    FineTunedAugmented,
    AugmentedFromScratch,
}

impl RealismVariant {
    pub const ALL: [RealismVariant; 6] = [
        RealismVariant::OnlySsim,
        RealismVariant::OnlyPsnr,
        RealismVariant::SsimPsnr,
        RealismVariant::GanSsimPsnr,
        RealismVariant::FineTunedAugmented,
        RealismVariant::AugmentedFromScratch,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            RealismVariant::OnlySsim => "Only SSIM",
            RealismVariant::OnlyPsnr => "Only PSNR",
            RealismVariant::SsimPsnr => "SSIM and PSNR",
            RealismVariant::GanSsimPsnr => "GAN with SSIM and PSNR",
            RealismVariant::FineTunedAugmented => "Fine-tuned augmented GAN",
            RealismVariant::AugmentedFromScratch => "Augmented GAN (Final model)",
        }
    }

    pub fn slug(&self) -> &'static str {
        match self {
            RealismVariant::OnlySsim => "only_ssim",
            RealismVariant::OnlyPsnr => "only_psnr",
            RealismVariant::SsimPsnr => "ssim_psnr",
            RealismVariant::GanSsimPsnr => "gan_ssim_psnr",
            RealismVariant::FineTunedAugmented => "fine_tuned_augmented",
            RealismVariant::AugmentedFromScratch => "augmented_from_scratch",
        }
    }

    pub fn flags(&self) -> LossFlags {
        match self {
            RealismVariant::OnlySsim => LossFlags { ssim: true, psnr: false, adversarial: false, augment: false },
            RealismVariant::OnlyPsnr => LossFlags { ssim: false, psnr: true, adversarial: false, augment: false },
            RealismVariant::SsimPsnr => LossFlags { ssim: true, psnr: true, adversarial: false, augment: false },
            RealismVariant::GanSsimPsnr => LossFlags { ssim: true, psnr: true, adversarial: true, augment: false },
            RealismVariant::FineTunedAugmented | RealismVariant::AugmentedFromScratch => LossFlags::default(),
        }
    }
}

impl std::str::FromStr for RealismVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "only_ssim" | "only-ssim" => Ok(RealismVariant::OnlySsim),
            "only_psnr" | "only-psnr" => Ok(RealismVariant::OnlyPsnr),
            "ssim_psnr" | "ssim-psnr" => Ok(RealismVariant::SsimPsnr),
            "gan_ssim_psnr" | "gan" => Ok(RealismVariant::GanSsimPsnr),
            "fine_tuned_augmented" | "fine-tuned" => Ok(RealismVariant::FineTunedAugmented),
            "augmented_from_scratch" | "final" => Ok(RealismVariant::AugmentedFromScratch),
            other => Err(Error::config(format!("unknown realism variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RealismAblationRow {
    pub variant: RealismVariant,
    pub label: String,
    pub recon_ssim: f64,
    pub checkpoint_dir: String,
    /// Hash of the parameters training STARTED from; for the fine-tuned
    /// variant this equals the hash of the SSIM+PSNR variant's checkpoint.
    pub initial_param_hash: String,
}

/// Trains every requested variant under the same budget and reports its test
/// reconstruction SSIM. The fine-tuned variant initializes from the
/// SSIM+PSNR variant's best checkpoint (training it first if necessary).
pub fn run_ablation_realism<E: Element>(
    data: &DatasetSplit,
    variants: &[RealismVariant],
    net_cfg: &NetworkConfig,
    base_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<Vec<RealismAblationRow>> {
    if variants.is_empty() {
        return Err(Error::config("no ablation variants requested"));
    }
    // the fine-tuned variant depends on ssim_psnr: run that one first
    let mut ordered: Vec<RealismVariant> = Vec::new();
    if variants.contains(&RealismVariant::FineTunedAugmented)
        && !variants.contains(&RealismVariant::SsimPsnr)
    {
        ordered.push(RealismVariant::SsimPsnr);
    }
    for v in RealismVariant::ALL {
        if variants.contains(&v) && !ordered.contains(&v) {
            ordered.push(v);
        }
    }

    let eval_pool = if data.test.is_empty() { &data.train } else { &data.test };
    let mut rows = Vec::new();
    let mut ssim_psnr_ckpt: Option<std::path::PathBuf> = None;
    for variant in ordered {
        let dir = out_dir.join(variant.slug());
        let cfg = TrainConfig {
            loss_flags: variant.flags(),
            checkpoint_dir: dir.clone(),
            ..base_cfg.clone()
        };
        let bundle = match variant {
            RealismVariant::FineTunedAugmented => {
                let src = ssim_psnr_ckpt
                    .as_ref()
                    .expect("ssim_psnr checkpoint trained before fine-tuning");
                checkpoint::load_bundle::<E>(src)?.0
            }
            _ => crate::networks::build_networks::<E>(net_cfg)?,
        };
        let initial_param_hash = param_hash(&bundle);
        let ckpt = train_disentangler_from::<E>(bundle, data, &cfg)?;
        if variant == RealismVariant::SsimPsnr {
            ssim_psnr_ckpt = Some(ckpt.dir.clone());
        }
        let (trained, _) = checkpoint::load_bundle::<E>(&ckpt.dir)?;
        let (report, _) = run_report(
            &trained,
            None,
            eval_pool,
            &data.train,
            &[Experiment::Reconstruction],
            eval_cfg,
        )?;
        if variants.contains(&variant) {
            rows.push(RealismAblationRow {
                variant,
                label: variant.label().to_string(),
                recon_ssim: report.rows[0].ssim_original,
                checkpoint_dir: ckpt.dir.display().to_string(),
                initial_param_hash,
            });
        } else {
            // prerequisite run requested only as fine-tune source
            rows.push(RealismAblationRow {
                variant,
                label: format!("{} (prerequisite)", variant.label()),
                recon_ssim: report.rows[0].ssim_original,
                checkpoint_dir: ckpt.dir.display().to_string(),
                initial_param_hash,
            });
        }
    }
    Ok(rows)
}

pub fn format_realism_table(rows: &[RealismAblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(12).max("Realism Loss".len());
    let mut out = format!("{:<width$}  SSIM\n", "Realism Loss");
    out.push_str(&"-".repeat(width + 8));
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<width$}  {:.2}%\n", r.label, r.recon_ssim * 100.0));
    }
    out
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasizeAblationRow {
    pub train_images: usize,
    pub recon_ssim: f64,
    pub identity_recognition: f64,
    pub disease_recognition: f64,
    pub checkpoint_dir: String,
}

/// Trains on nested subsets of the training data (smaller ⊂ larger under one
/// seed) with an identical epoch budget per size.
pub fn run_ablation_datasize<E: Element>(
    data: &DatasetSplit,
    sizes: &[usize],
    net_cfg: &NetworkConfig,
    base_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<Vec<DatasizeAblationRow>> {
    if sizes.is_empty() {
        return Err(Error::config("no dataset sizes requested"));
    }
    for &s in sizes {
        if s == 0 || s > data.train.len() {
            return Err(Error::config(format!(
                "requested training size {s} exceeds available {} images",
                data.train.len()
            )));
        }
    }
    // one seeded permutation; subsets are prefixes of it, re-sorted so the
    // full-size subset reproduces the original training order exactly
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(base_cfg.seed ^ 0xDA7A);
    order.shuffle(&mut rng);

    let eval_pool = if data.test.is_empty() { &data.train } else { &data.test };
    let mut rows = Vec::new();
    for &size in sizes {
        let mut chosen: Vec<usize> = order[..size].to_vec();
        chosen.sort_unstable();
        let subset: Vec<LabeledSample> = chosen.iter().map(|&i| data.train[i].clone()).collect();
        let sub_split = DatasetSplit {
            train: subset,
            validation: data.validation.clone(),
            test: data.test.clone(),
            num_identities: data.num_identities,
            num_classes: data.num_classes,
        };
        let dir = out_dir.join(format!("n{size:06}"));
        let cfg = TrainConfig { checkpoint_dir: dir, ..base_cfg.clone() };
        let ckpt = crate::training::train_disentangler::<E>(&sub_split, net_cfg, &cfg)?;
        let (trained, _) = checkpoint::load_bundle::<E>(&ckpt.dir)?;
        let (report, _) = run_report(
            &trained,
            None,
            eval_pool,
            &sub_split.train,
            &[Experiment::Reconstruction],
            eval_cfg,
        )?;
        let row = &report.rows[0];
        rows.push(DatasizeAblationRow {
            train_images: size,
            recon_ssim: row.ssim_original,
            identity_recognition: row.id_acc_original.unwrap_or(f64::NAN),
            disease_recognition: row.disease_accuracy,
            checkpoint_dir: ckpt.dir.display().to_string(),
        });
    }
    Ok(rows)
}

pub fn format_datasize_table(rows: &[DatasizeAblationRow]) -> String {
    let mut out = String::from("N. Images  SSIM    Identity Rec.  Disease Rec.\n");
    out.push_str(&"-".repeat(48));
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:<9}  {:>5.2}%  {:>12.2}%  {:>11.2}%\n",
            r.train_images,
            r.recon_ssim * 100.0,
            r.identity_recognition * 100.0,
            r.disease_recognition * 100.0
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, FactorSpec};
    use crate::IdentityMode;

    fn setup() -> (DatasetSplit, NetworkConfig, TrainConfig, EvalConfig) {
        let data = generate_synthetic(&FactorSpec {
            num_identities: 3,
            num_classes: 2,
            image_size: 16,
            samples: 48,
            seed: 21,
            ..Default::default()
        })
        .unwrap();
        let net = NetworkConfig {
            image_size: 16,
            base_width: 8,
            disc_width: 8,
            d_id: 6,
            d_med: 4,
            d_rest: 10,
            stages: 2,
            head_hidden: 16,
            vae_hidden: 16,
            vae_latent: 4,
            num_identities: 3,
            identity_mode: IdentityMode::Siamese,
            ..Default::default()
        };
        let cfg = TrainConfig {
            mode: IdentityMode::Siamese,
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            validation_every: 1,
            seed: 2,
            ..Default::default()
        };
        let eval = EvalConfig {
            metrics: crate::metrics::MetricConfig { ssim_window: 5, ..Default::default() },
            max_pairs: Some(4),
            ..Default::default()
        };
        (data, net, cfg, eval)
    }

    #[test]
    fn single_variant_gives_single_row() {
        let (data, net, cfg, eval) = setup();
        let tmp = tempfile::tempdir().unwrap();
        let rows = run_ablation_realism::<f32>(
            &data,
            &[RealismVariant::OnlySsim],
            &net,
            &cfg,
            &eval,
            tmp.path(),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].variant, RealismVariant::OnlySsim);
        let table = format_realism_table(&rows);
        assert!(table.contains("Only SSIM"));
    }

    #[test]
    fn fine_tune_pulls_in_prerequisite_and_hash_matches() {
        let (data, net, cfg, eval) = setup();
        let tmp = tempfile::tempdir().unwrap();
        let rows = run_ablation_realism::<f32>(
            &data,
            &[RealismVariant::FineTunedAugmented],
            &net,
            &cfg,
            &eval,
            tmp.path(),
        )
        .unwrap();
        assert_eq!(rows.len(), 2, "prerequisite ssim_psnr runs first");
        let ssim_psnr = rows.iter().find(|r| r.variant == RealismVariant::SsimPsnr).unwrap();
        let fine = rows.iter().find(|r| r.variant == RealismVariant::FineTunedAugmented).unwrap();
        let (bundle, _) = checkpoint::load_bundle::<f32>(Path::new(&ssim_psnr.checkpoint_dir)).unwrap();
        assert_eq!(fine.initial_param_hash, param_hash(&bundle));
    }

    #[test]
    fn datasize_subsets_are_nested_and_validated() {
        let (data, net, cfg, eval) = setup();
        let tmp = tempfile::tempdir().unwrap();
        assert!(run_ablation_datasize::<f32>(&data, &[10_000], &net, &cfg, &eval, tmp.path()).is_err());
        let rows =
            run_ablation_datasize::<f32>(&data, &[24, 36], &net, &cfg, &eval, tmp.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].train_images < rows[1].train_images);
        let table = format_datasize_table(&rows);
        assert!(table.contains("N. Images"));
    }

    #[test]
    fn unknown_variant_name_is_config_error() {
        assert!("nonsense".parse::<RealismVariant>().is_err());
        assert_eq!("only-ssim".parse::<RealismVariant>().unwrap(), RealismVariant::OnlySsim);
    }
}
