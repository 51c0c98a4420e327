//! Alternating optimization of the disentanglement network (generator side
//! and discriminator side) with validation-based checkpoint selection, plus
//! the second-phase identity-VAE training in [`vae`].
//!
//! Batches are processed one tape per sample (optionally fanned out over
//! rayon); gradients are reduced in sample order, so loss logs are bitwise
//! reproducible for a fixed seed in both execution modes.

pub mod augment;
pub mod vae;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::{sample_triplet, DatasetSplit, LabeledSample, TrainingTriplet};
use crate::error::{Error, Result};
use crate::losses::{
    self, adversarial_generator_tape, classification_multiclass_tape, classification_siamese_tape,
    disentanglement_loss_tape, discriminator_loss_tape, psnr_term_tape, ssim_tape, LossBreakdown,
    LossParts, LossWeights, ReplacedSlot,
};
use crate::metrics::{self, MetricConfig};
use crate::networks::checkpoint::{self, Checkpoint};
use crate::networks::{
    build_networks, image_to_element, image_to_f64, siamese_distance, split_latent,
    IdentityHead, LatentTriple, NetworkBundle, NetworkConfig,
};
use crate::nn::{batch_map, Adam, Binding, Element, GradMap, Parallelism, Tape, Tensor};
use crate::IdentityMode;
pub use augment::{augment_image, sample_aug_params, AugParams, AugmentConfig};

/// Ablation switches over the realism objective.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossFlags {
    pub ssim: bool,
    pub psnr: bool,
    pub adversarial: bool,
    pub augment: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags { ssim: true, psnr: true, adversarial: true, augment: true }
    }
}

/// Everything the trainer needs besides the network architecture.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub mode: IdentityMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    /// Validate (and checkpoint) every this many epochs.
    pub validation_every: usize,
    pub checkpoint_dir: PathBuf,
    /// Train the classifier heads jointly (default) or keep them frozen.
    pub freeze_classifiers: bool,
    pub parallelism: Parallelism,
    pub loss_flags: LossFlags,
    pub metrics: MetricConfig,
    pub vae_epochs: usize,
    pub vae_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: IdentityMode::Siamese,
            epochs: 60,
            batch_size: 16,
            learning_rate: 2e-5,
            weights: LossWeights::default(),
            seed: 0,
            augmentation: AugmentConfig::default(),
            validation_every: 5,
            checkpoint_dir: PathBuf::from("checkpoints"),
            freeze_classifiers: false,
            parallelism: Parallelism::default(),
            loss_flags: LossFlags::default(),
            metrics: MetricConfig::default(),
            vae_epochs: 200,
            vae_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.validation_every == 0 {
            return Err(Error::config("validation_every must be positive"));
        }
        self.weights.validate()?;
        self.augmentation.validate()?;
        self.metrics.validate()?;
        Ok(())
    }
}

/// Appends one JSON line per training step.
pub struct LossLog {
    file: std::io::BufWriter<fs::File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(LossLog { file: std::io::BufWriter::new(fs::File::create(path)?) })
    }

    pub fn append(&mut self, b: &LossBreakdown) -> Result<()> {
        let line = serde_json::to_string(b).expect("serializable breakdown");
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }
}

struct SampleInput<E: Element> {
    ori: Tensor<E>,
    tar: Tensor<E>,
    same: Option<Tensor<E>>,
    y_med: usize,
    y_id: usize,
    dropout_seed: u64,
    aug: AugParams,
}

struct SampleOutput<E: Element> {
    parts: LossParts,
    gen_grads: GradMap<E>,
    disc_grads: Option<GradMap<E>>,
}

/// Orchestrates one disentanglement training run.
pub struct Trainer<E: Element> {
    pub bundle: NetworkBundle<E>,
    cfg: TrainConfig,
    opt_encoder: Adam<E>,
    opt_decoder: Adam<E>,
    opt_c_med: Adam<E>,
    opt_c_id: Option<Adam<E>>,
    opt_disc: Adam<E>,
    rng: ChaCha8Rng,
    pub step_index: u64,
    nonfinite_streak: usize,
}

impl<E: Element> Trainer<E> {
    pub fn new(bundle: NetworkBundle<E>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if bundle.cfg.identity_mode != cfg.mode {
            return Err(Error::config(format!(
                "network identity mode {} does not match training mode {}",
                bundle.cfg.identity_mode, cfg.mode
            )));
        }
        let lr = cfg.learning_rate;
        let opt_encoder = Adam::new(&bundle.encoder.params, lr);
        let opt_decoder = Adam::new(&bundle.decoder.params, lr);
        let opt_c_med = Adam::new(&bundle.c_med.params, lr);
        let opt_c_id = match &bundle.c_id {
            IdentityHead::Multiclass(h) => Some(Adam::new(&h.params, lr)),
            IdentityHead::Siamese => None,
        };
        let opt_disc = Adam::new(&bundle.discriminator.params, lr);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            bundle,
            cfg,
            opt_encoder,
            opt_decoder,
            opt_c_med,
            opt_c_id,
            opt_disc,
            rng,
            step_index: 0,
            nonfinite_streak: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimization step on a batch of triplets: reconstruction with the
    /// realism terms, one replacement pass (coin flip between identity and
    /// medical), the classification objective, one generator update and one
    /// discriminator update on augmented real/generated pairs.
    pub fn train_step(&mut self, batch: &[TrainingTriplet<'_>]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let replaced = if self.rng.gen::<bool>() { ReplacedSlot::Identity } else { ReplacedSlot::Medical };
        let inputs: Vec<SampleInput<E>> = batch
            .iter()
            .map(|t| SampleInput {
                ori: image_to_element::<E>(&t.original.image),
                tar: image_to_element::<E>(&t.target.image),
                same: t.same_identity.map(|s| image_to_element::<E>(&s.image)),
                y_med: t.original.class_label,
                y_id: t.original.identity_label,
                dropout_seed: self.rng.gen(),
                aug: sample_aug_params(&self.cfg.augmentation, &mut self.rng),
            })
            .collect();

        let bundle = &self.bundle;
        let cfg = &self.cfg;
        let outputs = batch_map(cfg.parallelism, &inputs, |_, input| {
            sample_step(bundle, cfg, input, replaced)
        });

        // deterministic reduction in sample order
        let n = outputs.len() as f64;
        let mut parts = LossParts::default();
        let mut gen_grads: GradMap<E> = GradMap::new();
        let mut disc_grads: GradMap<E> = GradMap::new();
        for out in outputs {
            let p = out.parts;
            parts.classification += p.classification / n;
            parts.realism += p.realism / n;
            parts.disentanglement += p.disentanglement / n;
            parts.adversarial += p.adversarial / n;
            parts.ssim_term += p.ssim_term / n;
            parts.psnr_term += p.psnr_term / n;
            parts.med_ce += p.med_ce / n;
            parts.id_term += p.id_term / n;
            parts.discriminator += p.discriminator / n;
            merge_grads(&mut gen_grads, out.gen_grads);
            if let Some(d) = out.disc_grads {
                merge_grads(&mut disc_grads, d);
            }
        }
        let scale = E::from_f64(1.0 / n);
        for g in gen_grads.values_mut().chain(disc_grads.values_mut()) {
            for v in g.as_slice_mut().expect("contiguous grad") {
                *v = *v * scale;
            }
        }

        let mut breakdown = losses::total_loss(&parts, &cfg.weights).map_err(|e| {
            Error::training(format!("{e} at step {}", self.step_index))
        })?;
        breakdown.step = self.step_index;

        self.opt_encoder.step(&mut self.bundle.encoder.params, &gen_grads);
        self.opt_decoder.step(&mut self.bundle.decoder.params, &gen_grads);
        self.opt_c_med.step(&mut self.bundle.c_med.params, &gen_grads);
        if let (Some(opt), IdentityHead::Multiclass(h)) = (&mut self.opt_c_id, &mut self.bundle.c_id) {
            opt.step(&mut h.params, &gen_grads);
        }
        if !disc_grads.is_empty() {
            self.opt_disc.step(&mut self.bundle.discriminator.params, &disc_grads);
        }
        self.step_index += 1;
        Ok(breakdown)
    }
}

fn merge_grads<E: Element>(into: &mut GradMap<E>, from: GradMap<E>) {
    for (k, g) in from {
        match into.get_mut(&k) {
            Some(acc) => crate::nn::add_assign(acc, &g),
            None => {
                into.insert(k, g);
            }
        }
    }
}

/// Builds and differentiates both tapes of one sample.
fn sample_step<E: Element>(
    bundle: &NetworkBundle<E>,
    cfg: &TrainConfig,
    input: &SampleInput<E>,
    replaced: ReplacedSlot,
) -> SampleOutput<E> {
    let w = &cfg.weights;
    let flags = cfg.loss_flags;
    let head_bind = if cfg.freeze_classifiers { Binding::Frozen } else { Binding::Trainable };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(input.dropout_seed);
    let mut parts = LossParts::default();

    let mut t = Tape::<E>::new();
    let x_ori = t.leaf(input.ori.clone());
    let full_ori = bundle.encoder.forward(&mut t, x_ori, Binding::Trainable);
    let triple_ori = split_latent(&mut t, &bundle.cfg, full_ori);
    let recon = bundle.decoder.forward(&mut t, full_ori, Binding::Trainable);

    // realism terms on the reconstruction
    let mut realism_terms: Vec<crate::nn::Var> = Vec::new();
    if flags.ssim {
        let s = ssim_tape(&mut t, x_ori, recon, &cfg.metrics);
        let neg = t.scale(s, E::from_f64(-1.0));
        let term = t.add_scalar(neg, E::one());
        parts.ssim_term = t.scalar(term).as_f64();
        realism_terms.push(term);
    }
    if flags.psnr {
        let term = psnr_term_tape(&mut t, x_ori, recon, &cfg.metrics);
        parts.psnr_term = t.scalar(term).as_f64();
        realism_terms.push(term);
    }
    if flags.adversarial {
        let logit = bundle.discriminator.forward_logit(&mut t, recon, Binding::Frozen);
        let prob = t.sigmoid(logit);
        let term = adversarial_generator_tape(&mut t, prob);
        parts.adversarial += t.scalar(term).as_f64();
        realism_terms.push(term);
    }

    // replacement pass: compose (target's vector i, original's others) from
    // detached latents, decode, re-encode, and constrain with the
    // disentanglement loss
    let mut tar_vars = None;
    let mut disent_var = None;
    if w.lambda_d > 0.0 || cfg.mode == IdentityMode::Siamese {
        let tar_bind = match cfg.mode {
            IdentityMode::Siamese => Binding::Trainable,
            IdentityMode::Multiclass => Binding::Frozen,
        };
        let x_tar = t.leaf(input.tar.clone());
        let full_tar = bundle.encoder.forward(&mut t, x_tar, tar_bind);
        let triple_tar = split_latent(&mut t, &bundle.cfg, full_tar);
        tar_vars = Some(triple_tar);
        if w.lambda_d > 0.0 {
            let ori_vals = LatentTriple::split(&bundle.cfg, t.value(full_ori)).expect("triple");
            let tar_vals = LatentTriple::split(&bundle.cfg, t.value(full_tar)).expect("triple");
            let composed = match replaced {
                ReplacedSlot::Identity => LatentTriple {
                    z_id: tar_vals.z_id.clone(),
                    z_med: ori_vals.z_med.clone(),
                    z_rest: ori_vals.z_rest.clone(),
                },
                ReplacedSlot::Medical => LatentTriple {
                    z_id: ori_vals.z_id.clone(),
                    z_med: tar_vals.z_med.clone(),
                    z_rest: ori_vals.z_rest.clone(),
                },
            };
            let comp_leaf = t.leaf(composed.concat());
            let gen_img = bundle.decoder.forward(&mut t, comp_leaf, Binding::Trainable);
            let full_gen = bundle.encoder.forward(&mut t, gen_img, Binding::Trainable);
            let triple_gen = split_latent(&mut t, &bundle.cfg, full_gen);
            let d = disentanglement_loss_tape(&mut t, triple_gen, &ori_vals, &tar_vals, replaced);
            parts.disentanglement = t.scalar(d).as_f64();
            disent_var = Some(d);
            if flags.adversarial {
                let logit = bundle.discriminator.forward_logit(&mut t, gen_img, Binding::Frozen);
                let prob = t.sigmoid(logit);
                let term = adversarial_generator_tape(&mut t, prob);
                parts.adversarial += t.scalar(term).as_f64();
                realism_terms.push(term);
            }
        }
    }

    // classification on the original's latents
    let med_logits = bundle
        .c_med
        .forward_logits(&mut t, triple_ori.z_med, head_bind, Some(&mut dropout_rng));
    let class_terms = match (&bundle.c_id, cfg.mode) {
        (IdentityHead::Multiclass(head), IdentityMode::Multiclass) => {
            let id_logits =
                head.forward_logits(&mut t, triple_ori.z_id, head_bind, Some(&mut dropout_rng));
            classification_multiclass_tape(&mut t, med_logits, id_logits, input.y_med, input.y_id, w)
        }
        (IdentityHead::Siamese, IdentityMode::Siamese) => {
            let same = input.same.as_ref().expect("siamese triplet carries same-identity image");
            let x_same = t.leaf(same.clone());
            let full_same = bundle.encoder.forward(&mut t, x_same, Binding::Trainable);
            let triple_same = split_latent(&mut t, &bundle.cfg, full_same);
            let triple_tar = tar_vars.expect("target encoded in siamese mode");
            classification_siamese_tape(
                &mut t,
                med_logits,
                triple_ori.z_id,
                triple_same.z_id,
                triple_tar.z_id,
                input.y_med,
                w,
            )
        }
        _ => unreachable!("trainer construction enforces mode agreement"),
    };
    parts.med_ce = t.scalar(class_terms.med_ce).as_f64();
    parts.id_term = t.scalar(class_terms.id_term).as_f64();
    parts.classification = t.scalar(class_terms.total).as_f64();

    // total = classification + λ_r · realism + λ_d · disentanglement
    let mut total = class_terms.total;
    if !realism_terms.is_empty() {
        let mut realism = realism_terms[0];
        for term in &realism_terms[1..] {
            realism = t.add(realism, *term);
        }
        parts.realism = t.scalar(realism).as_f64();
        let scaled = t.scale(realism, E::from_f64(w.lambda_r));
        total = t.add(total, scaled);
    }
    if let Some(d) = disent_var {
        let scaled = t.scale(d, E::from_f64(w.lambda_d));
        total = t.add(total, scaled);
    }
    let gen_grads = t.backward(total);

    // discriminator tape on (augmented real, augmented generated), the same
    // transform applied to both halves of the pair
    let disc_grads = if flags.adversarial {
        let recon_detached = t.value(recon).clone();
        let (real_in, fake_in) = if flags.augment {
            (
                augment_image(&input.ori, &cfg.augmentation, &input.aug),
                augment_image(&recon_detached, &cfg.augmentation, &input.aug),
            )
        } else {
            (input.ori.clone(), recon_detached)
        };
        let mut td = Tape::<E>::new();
        let real = td.leaf(real_in);
        let fake = td.leaf(fake_in);
        let real_logit = bundle.discriminator.forward_logit(&mut td, real, Binding::Trainable);
        let fake_logit = bundle.discriminator.forward_logit(&mut td, fake, Binding::Trainable);
        let real_prob = td.sigmoid(real_logit);
        let fake_prob = td.sigmoid(fake_logit);
        let dl = discriminator_loss_tape(&mut td, real_prob, fake_prob);
        parts.discriminator = td.scalar(dl).as_f64();
        Some(td.backward(dl))
    } else {
        None
    };

    SampleOutput { parts, gen_grads, disc_grads }
}

// ---------------------------------------------------------------------------
// validation and the epoch loop
// ---------------------------------------------------------------------------

/// Raw validation components of one checkpoint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ValidationPoint {
    pub epoch: usize,
    pub recon_ssim: f64,
    pub identity_accuracy: f64,
    pub disease_accuracy: f64,
}

/// Reconstruction SSIM, identity accuracy and disease accuracy on a sample
/// set (capped at 64 images to keep validation cheap).
pub fn validation_components<E: Element>(
    bundle: &NetworkBundle<E>,
    samples: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<ValidationPoint> {
    if samples.is_empty() {
        return Err(Error::contract("empty validation set"));
    }
    let subset: Vec<&LabeledSample> = samples.iter().take(64).collect();
    let encoded: Vec<(LatentTriple<E>, Tensor<E>)> = batch_map(cfg.parallelism, &subset, |_, s| {
        let img = image_to_element::<E>(&s.image);
        let triple = bundle.encode(&img).expect("validation encode");
        let recon = bundle.decode(&triple).expect("validation decode");
        (triple, recon)
    });

    let mut ssim_sum = 0.0;
    let mut disease_hits = 0usize;
    for ((triple, recon), s) in encoded.iter().zip(&subset) {
        ssim_sum += metrics::ssim(&s.image, &image_to_f64(recon), &cfg.metrics)?;
        let probs = bundle.med_probs(&triple.z_med)?;
        let pred = argmax(&probs);
        disease_hits += usize::from(pred == s.class_label);
    }

    let identity_accuracy = match &bundle.c_id {
        IdentityHead::Multiclass(_) => {
            let mut hits = 0usize;
            for ((triple, _), s) in encoded.iter().zip(&subset) {
                let probs = bundle.id_probs(&triple.z_id)?.expect("multiclass");
                hits += usize::from(argmax(&probs) == s.identity_label);
            }
            hits as f64 / subset.len() as f64
        }
        IdentityHead::Siamese => {
            // verification accuracy over deterministic same/different pairs
            let zs: Vec<Vec<f64>> = encoded
                .iter()
                .map(|(t, _)| t.z_id.iter().map(|v| v.as_f64()).collect())
                .collect();
            let mut decisions = 0usize;
            let mut correct = 0usize;
            for i in 0..subset.len() {
                for j in (i + 1)..subset.len() {
                    let d = siamese_distance(&zs[i], &zs[j])?;
                    let same = subset[i].patient_key == subset[j].patient_key;
                    let predicted_same = d < cfg.weights.threshold_t;
                    decisions += 1;
                    correct += usize::from(same == predicted_same);
                }
            }
            if decisions == 0 {
                0.0
            } else {
                correct as f64 / decisions as f64
            }
        }
    };

    Ok(ValidationPoint {
        epoch: 0,
        recon_ssim: ssim_sum / subset.len() as f64,
        identity_accuracy,
        disease_accuracy: disease_hits as f64 / subset.len() as f64,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Min–max scales each component over the run and averages them; ties go to
/// the earliest epoch.
pub fn select_best_validation(points: &[ValidationPoint]) -> usize {
    assert!(!points.is_empty());
    let scale = |get: fn(&ValidationPoint) -> f64| -> Vec<f64> {
        let lo = points.iter().map(get).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(get).fold(f64::NEG_INFINITY, f64::max);
        points
            .iter()
            .map(|p| if hi - lo < 1e-12 { 0.5 } else { (get(p) - lo) / (hi - lo) })
            .collect()
    };
    let a = scale(|p| p.recon_ssim);
    let b = scale(|p| p.identity_accuracy);
    let c = scale(|p| p.disease_accuracy);
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..points.len() {
        let score = (a[i] + b[i] + c[i]) / 3.0;
        if score > best_score + 1e-12 {
            best_score = score;
            best = i;
        }
    }
    best
}

/// Full training run: epochs of [`Trainer::train_step`], periodic validation
/// checkpoints, and best-checkpoint selection by the composite metric.
pub fn train_disentangler<E: Element>(
    data: &DatasetSplit,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let bundle = build_networks::<E>(net_cfg)?;
    train_disentangler_from(bundle, data, cfg)
}

/// As [`train_disentangler`], starting from an existing bundle (fine-tuning).
pub fn train_disentangler_from<E: Element>(
    bundle: NetworkBundle<E>,
    data: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut trainer = Trainer::new(bundle, cfg.clone())?;
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5EED);
    let mut log = LossLog::create(&cfg.checkpoint_dir.join("loss_log.jsonl"))?;

    let steps_per_epoch = (data.train.len() / cfg.batch_size).max(1);
    let mut points: Vec<ValidationPoint> = Vec::new();
    let mut dirs: Vec<PathBuf> = Vec::new();

    let validate = |trainer: &Trainer<E>, epoch: usize, points: &mut Vec<ValidationPoint>, dirs: &mut Vec<PathBuf>| -> Result<()> {
        let pool = if data.validation.is_empty() { &data.train } else { &data.validation };
        let mut point = validation_components(&trainer.bundle, pool, cfg)?;
        point.epoch = epoch;
        let dir = cfg.checkpoint_dir.join(format!("val_epoch_{epoch:05}"));
        checkpoint::save_bundle(&dir, &trainer.bundle, epoch, point.recon_ssim)?;
        points.push(point);
        dirs.push(dir);
        Ok(())
    };

    if cfg.epochs == 0 {
        validate(&trainer, 0, &mut points, &mut dirs)?;
    }

    for epoch in 1..=cfg.epochs {
        for _ in 0..steps_per_epoch {
            let batch: Vec<TrainingTriplet> = (0..cfg.batch_size)
                .map(|_| sample_triplet(&data.train, cfg.mode, &mut sampler_rng))
                .collect::<Result<_>>()?;
            match trainer.train_step(&batch) {
                Ok(breakdown) => {
                    trainer.nonfinite_streak = 0;
                    log.append(&breakdown)?;
                }
                Err(Error::Training(msg)) => {
                    trainer.nonfinite_streak += 1;
                    if trainer.nonfinite_streak >= 3 {
                        return Err(Error::training(format!(
                            "aborting: non-finite loss for 3 consecutive steps ({msg})"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        if epoch % cfg.validation_every == 0 || epoch == cfg.epochs {
            validate(&trainer, epoch, &mut points, &mut dirs)?;
        }
    }

    let best = select_best_validation(&points);
    let best_dir = cfg.checkpoint_dir.join("best");
    copy_checkpoint_dir(&dirs[best], &best_dir)?;
    fs::write(
        cfg.checkpoint_dir.join("validation_log.json"),
        serde_json::to_string_pretty(&points).unwrap(),
    )?;
    // drop the intermediates, keep only the winner
    for (i, dir) in dirs.iter().enumerate() {
        if i != best {
            let _ = fs::remove_dir_all(dir);
        }
    }
    let meta = checkpoint::read_manifest(&best_dir)?;
    Ok(Checkpoint { dir: best_dir, meta })
}

fn copy_checkpoint_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            fs::copy(entry.path(), to.join(entry.file_name()))?;
        }
    }
    Ok(())
}
