//! Second training phase: the identity VAE is optimized against a frozen
//! disentangler. Reconstruction and KL keep the synthetic identities on the
//! real identity manifold; the privacy regularizer (entropy maximization in
//! multiclass mode, distance hinges in Siamese mode) pushes decoded random
//! samples away from real patients.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::io::Write as _;

use super::TrainConfig;
use crate::datasets::DatasetSplit;
use crate::error::{Error, Result};
use crate::losses::{privacy_multiclass_tape, privacy_siamese_tape, PrivacyTerms};
use crate::networks::checkpoint::{self, Checkpoint};
use crate::networks::{image_to_element, IdentityHead, IdentityVae, NetworkBundle, NetworkConfig};
use crate::nn::{batch_map, standard_normal, Adam, Binding, Element, GradMap, Tape, Tensor, Var};

/// One VAE optimization step's losses, one JSON line per step.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct VaeLossRecord {
    pub step: u64,
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

/// Precomputed identity vectors of one split, with their identity labels.
struct IdentityVectors<E: Element> {
    z: Vec<Tensor<E>>,
    identity: Vec<usize>,
}

fn encode_identities<E: Element>(
    bundle: &NetworkBundle<E>,
    samples: &[crate::datasets::LabeledSample],
    par: crate::nn::Parallelism,
) -> IdentityVectors<E> {
    let refs: Vec<_> = samples.iter().collect();
    let z = batch_map(par, &refs, |_, s| {
        bundle
            .encode(&image_to_element::<E>(&s.image))
            .expect("vae phase encode")
            .z_id
    });
    IdentityVectors { z, identity: samples.iter().map(|s| s.identity_label).collect() }
}

struct VaeSampleInput<E: Element> {
    z_id: Tensor<E>,
    z_other: Option<Tensor<E>>,
    eps: Tensor<E>,
    noise: Tensor<E>,
    dropout_seed: u64,
}

/// One privacy-loss evaluation on a tape; returns the per-term scalars and,
/// when `train` is set, the VAE gradients.
fn vae_sample_pass<E: Element>(
    bundle: &NetworkBundle<E>,
    vae: &IdentityVae<E>,
    input: &VaeSampleInput<E>,
    w: &crate::losses::LossWeights,
    regularizer: bool,
    train: bool,
) -> (f64, f64, f64, Option<GradMap<E>>) {
    let mut t = Tape::<E>::new();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(input.dropout_seed);
    let bind = if train { Binding::Trainable } else { Binding::Frozen };
    macro_rules! rng_opt {
        () => {
            if train { Some(&mut dropout_rng) } else { None }
        };
    }

    let z_id = t.leaf(input.z_id.clone());
    let (mu, logvar) = vae.encode(&mut t, z_id, bind, rng_opt!());
    // reparameterized sample: z = μ + exp(logvar/2) ⊙ ε
    let half = t.scale(logvar, E::from_f64(0.5));
    let sigma = t.exp(half);
    let eps = t.leaf(input.eps.clone());
    let noise_scaled = t.mul(sigma, eps);
    let z = t.add(mu, noise_scaled);
    let vae_out = vae.decode(&mut t, z, bind, rng_opt!());

    // independent standard-normal draw decoded to a synthetic identity
    let x = t.leaf(input.noise.clone());
    let z_sampled = vae.decode(&mut t, x, bind, rng_opt!());

    let terms: PrivacyTerms = match &bundle.c_id {
        IdentityHead::Multiclass(head) => {
            let logits = if regularizer {
                Some(head.forward_logits(&mut t, z_sampled, Binding::Frozen, None))
            } else {
                None
            };
            privacy_multiclass_tape(&mut t, z_id, vae_out, mu, logvar, logits)
        }
        IdentityHead::Siamese => {
            let refs: Option<(Var, Var)> = if regularizer {
                let other = t.leaf(
                    input
                        .z_other
                        .clone()
                        .expect("siamese privacy loss needs a random other patient"),
                );
                Some((z_id, other))
            } else {
                None
            };
            privacy_siamese_tape(&mut t, z_id, vae_out, mu, logvar, z_sampled, refs, w)
        }
    };
    let recon = t.scalar(terms.recon).as_f64();
    let kl = t.scalar(terms.kl).as_f64();
    let total = t.scalar(terms.total).as_f64();
    let grads = train.then(|| t.backward(terms.total));
    (recon, kl, total, grads)
}

/// Trains the identity VAE against the frozen `bundle`. With
/// `privacy_regularizer` off the objective reduces to a plain VAE
/// (reconstruction + KL), the ablation of the anonymization tables.
pub fn train_identity_vae<E: Element>(
    bundle: &NetworkBundle<E>,
    data: &DatasetSplit,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    privacy_regularizer: bool,
    out_dir: &PathBuf,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.vae_epochs == 0 {
        return Err(Error::config("vae_epochs must be positive"));
    }
    let train_vecs = encode_identities(bundle, &data.train, cfg.parallelism);
    let val_pool = if data.validation.is_empty() { &data.train } else { &data.validation };
    let val_vecs = encode_identities(bundle, val_pool, cfg.parallelism);
    if train_vecs.z.is_empty() {
        return Err(Error::contract("empty training set for the identity VAE"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9A7E_1D00);
    let mut vae = IdentityVae::<E>::new(net_cfg, &mut rng);
    let mut opt = Adam::new(&vae.params, cfg.learning_rate);
    std::fs::create_dir_all(out_dir)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("vae_loss_log.jsonl"))?);

    let batch_size = cfg.vae_batch_size.max(1);
    let steps_per_epoch = (train_vecs.z.len() / batch_size).max(1);
    let mut best: Option<(f64, usize)> = None;
    let mut step_index = 0u64;

    for epoch in 1..=cfg.vae_epochs {
        for _ in 0..steps_per_epoch {
            let inputs: Vec<VaeSampleInput<E>> = (0..batch_size)
                .map(|_| {
                    let i = rng.gen_range(0..train_vecs.z.len());
                    let z_other = pick_other_identity(&train_vecs, i, &mut rng);
                    VaeSampleInput {
                        z_id: train_vecs.z[i].clone(),
                        z_other,
                        eps: standard_normal::<E>(vae.d_v, &mut rng),
                        noise: standard_normal::<E>(vae.d_v, &mut rng),
                        dropout_seed: rng.gen(),
                    }
                })
                .collect();
            let outs = batch_map(cfg.parallelism, &inputs, |_, input| {
                vae_sample_pass(bundle, &vae, input, &cfg.weights, privacy_regularizer, true)
            });
            let n = outs.len() as f64;
            let mut grads: GradMap<E> = GradMap::new();
            let (mut recon, mut kl, mut total) = (0.0, 0.0, 0.0);
            for (r, k, tt, g) in outs {
                recon += r / n;
                kl += k / n;
                total += tt / n;
                super::merge_grads(&mut grads, g.expect("training pass"));
            }
            if !total.is_finite() {
                return Err(Error::training(format!(
                    "non-finite VAE loss at step {step_index}"
                )));
            }
            let scale = E::from_f64(1.0 / n);
            for g in grads.values_mut() {
                g.mapv_inplace(|v| v * scale);
            }
            opt.step(&mut vae.params, &grads);
            let record = VaeLossRecord { step: step_index, reconstruction: recon, kl, total };
            log.write_all(serde_json::to_string(&record).expect("serializable").as_bytes())?;
            log.write_all(b"\n")?;
            log.flush()?;
            step_index += 1;
        }

        // validation: mean privacy loss with fixed evaluation noise
        let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7E57);
        let val_inputs: Vec<VaeSampleInput<E>> = (0..val_vecs.z.len())
            .map(|i| VaeSampleInput {
                z_id: val_vecs.z[i].clone(),
                z_other: pick_other_identity(&val_vecs, i, &mut vrng),
                eps: standard_normal::<E>(vae.d_v, &mut vrng),
                noise: standard_normal::<E>(vae.d_v, &mut vrng),
                dropout_seed: 0,
            })
            .collect();
        let outs = batch_map(cfg.parallelism, &val_inputs, |_, input| {
            vae_sample_pass(bundle, &vae, input, &cfg.weights, privacy_regularizer, false)
        });
        let val_loss = outs.iter().map(|(_, _, t, _)| *t).sum::<f64>() / outs.len().max(1) as f64;
        let improved = best.map(|(b, _)| val_loss < b).unwrap_or(true);
        if improved {
            checkpoint::save_vae(&out_dir.join("best"), &vae, net_cfg, epoch, val_loss)?;
            best = Some((val_loss, epoch));
        }
    }

    let meta = checkpoint::read_manifest(&out_dir.join("best"))?;
    Ok(Checkpoint { dir: out_dir.join("best"), meta })
}

fn pick_other_identity<E: Element>(
    vecs: &IdentityVectors<E>,
    current: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Tensor<E>> {
    let others: Vec<usize> = (0..vecs.z.len())
        .filter(|&j| vecs.identity[j] != vecs.identity[current])
        .collect();
    if others.is_empty() {
        None
    } else {
        Some(vecs.z[others[rng.gen_range(0..others.len())]].clone())
    }
}
