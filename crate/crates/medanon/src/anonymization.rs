//! Latent surgery: replace the identity vector with a VAE-sampled synthetic
//! identity (anonymization), replace the medical vector with a target's
//! (counterfactual generation), or replace identity with an average of donor
//! identities (the classical baseline). The medical and residual vectors fed
//! to the decoder are always the original's, bitwise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::LabeledSample;
use crate::error::{Error, Result};
use crate::networks::{image_to_element, IdentityVae, LatentTriple, NetworkBundle};
use crate::nn::{standard_normal, Element, Tensor};

/// How the synthetic identity was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnonymizationMethod {
    Vae,
    VaeNoEntropy,
    AverageK(usize),
}

/// Output of one anonymization: the generated image, the synthetic identity
/// that replaced the original's, and the original's full latent triple for
/// downstream auditing.
pub struct AnonymizationResult<E: Element> {
    pub image: Tensor<E>,
    pub synthetic_z_id: Tensor<E>,
    pub source_latents: LatentTriple<E>,
    pub method: AnonymizationMethod,
}

/// Replaces the identity latent with `D_vae(X)`, X ~ N(0,1). Pure function of
/// (checkpoints, image, rng state).
pub fn anonymize<E: Element>(
    bundle: &NetworkBundle<E>,
    vae: &IdentityVae<E>,
    image: &Tensor<E>,
    rng: &mut ChaCha8Rng,
) -> Result<AnonymizationResult<E>> {
    let source = bundle.encode(image)?;
    let noise = standard_normal::<E>(vae.d_v, rng);
    let synthetic = vae.decode_value(&noise)?;
    if synthetic.len() != bundle.cfg.d_id {
        return Err(Error::contract(format!(
            "VAE output dim {} does not match d_id {}",
            synthetic.len(),
            bundle.cfg.d_id
        )));
    }
    let composed = LatentTriple {
        z_id: synthetic.clone(),
        z_med: source.z_med.clone(),
        z_rest: source.z_rest.clone(),
    };
    let image = bundle.decode(&composed)?;
    Ok(AnonymizationResult { image, synthetic_z_id: synthetic, source_latents: source, method: AnonymizationMethod::Vae })
}

/// Decodes (z_id of the original, z_med of the target, z_rest of the
/// original): the counterfactual "how would this patient look with the
/// target's condition".
pub fn counterfactual<E: Element>(
    bundle: &NetworkBundle<E>,
    image: &Tensor<E>,
    target_image: &Tensor<E>,
) -> Result<Tensor<E>> {
    let source = bundle.encode(image)?;
    let target = bundle.encode(target_image)?;
    bundle.decode(&LatentTriple {
        z_id: source.z_id,
        z_med: target.z_med,
        z_rest: source.z_rest,
    })
}

/// Identity-averaging baseline: the synthetic identity is the arithmetic mean
/// of k donor images' identity vectors.
pub fn average_identities<E: Element>(
    bundle: &NetworkBundle<E>,
    image: &Tensor<E>,
    donor_images: &[Tensor<E>],
) -> Result<AnonymizationResult<E>> {
    let k = donor_images.len();
    if k < 2 {
        return Err(Error::contract(format!(
            "identity averaging needs at least 2 donors, got {k}"
        )));
    }
    let source = bundle.encode(image)?;
    let mut mean = Tensor::<E>::zeros(ndarray::IxDyn(&[bundle.cfg.d_id]));
    for donor in donor_images {
        let z = bundle.encode(donor)?.z_id;
        for (m, v) in mean.as_slice_mut().unwrap().iter_mut().zip(z.as_slice().unwrap()) {
            *m = *m + *v;
        }
    }
    let scale = E::from_f64(1.0 / k as f64);
    mean.mapv_inplace(|v| v * scale);
    let composed = LatentTriple {
        z_id: mean.clone(),
        z_med: source.z_med.clone(),
        z_rest: source.z_rest.clone(),
    };
    let image = bundle.decode(&composed)?;
    Ok(AnonymizationResult {
        image,
        synthetic_z_id: mean,
        source_latents: source,
        method: AnonymizationMethod::AverageK(k),
    })
}

/// Picks `k` donor images of distinct identities different from
/// `original_identity`, uniformly without replacement; one random image per
/// chosen identity. `k = None` selects every other identity.
pub fn pick_donors<'a>(
    pool: &'a [LabeledSample],
    original_identity: usize,
    k: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a LabeledSample>> {
    let mut by_identity: std::collections::BTreeMap<usize, Vec<&LabeledSample>> =
        std::collections::BTreeMap::new();
    for s in pool {
        if s.identity_label != original_identity {
            by_identity.entry(s.identity_label).or_default().push(s);
        }
    }
    let identities: Vec<usize> = by_identity.keys().copied().collect();
    let k = k.unwrap_or(identities.len());
    if k > identities.len() {
        return Err(Error::contract(format!(
            "requested {k} donor identities, only {} available",
            identities.len()
        )));
    }
    // uniform sample without replacement, order-stable for a fixed seed
    let mut chosen = identities;
    for i in 0..k {
        let j = i + rng.gen_range(0..chosen.len() - i);
        chosen.swap(i, j);
    }
    chosen.truncate(k);
    Ok(chosen
        .into_iter()
        .map(|id| {
            let imgs = &by_identity[&id];
            imgs[rng.gen_range(0..imgs.len())]
        })
        .collect())
}

/// Draws `n` synthetic identities from the VAE prior; deterministic for a
/// fixed rng state.
pub fn sample_synthetic_identity<E: Element>(
    vae: &IdentityVae<E>,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<Vec<Tensor<E>>> {
    (0..n)
        .map(|_| {
            let noise = standard_normal::<E>(vae.d_v, rng);
            vae.decode_value(&noise)
        })
        .collect()
}

/// Convenience for evaluation paths working on dataset samples.
pub fn anonymize_sample<E: Element>(
    bundle: &NetworkBundle<E>,
    vae: &IdentityVae<E>,
    sample: &LabeledSample,
    rng: &mut ChaCha8Rng,
) -> Result<AnonymizationResult<E>> {
    anonymize(bundle, vae, &image_to_element::<E>(&sample.image), rng)
}
