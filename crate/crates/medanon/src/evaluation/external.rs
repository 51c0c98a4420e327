//! Optional external evaluator: fresh classifier heads trained on held-out
//! data over the frozen encoder's latents, so the report is not produced by
//! the same heads that shaped the representation during training.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EvalModel;
use crate::datasets::LabeledSample;
use crate::error::{Error, Result};
use crate::networks::{image_to_element, ClassifierHead, LatentTriple, NetworkBundle};
use crate::nn::{Adam, Binding, Element, GradMap, Tape};
use crate::IdentityMode;

/// Wraps a frozen bundle with freshly trained evaluation heads.
pub struct ExternalEvaluator<'a, E: Element> {
    bundle: &'a NetworkBundle<E>,
    c_med: ClassifierHead<E>,
    c_id: Option<ClassifierHead<E>>,
}

fn train_head<E: Element>(
    head: &mut ClassifierHead<E>,
    inputs: &[ArrayD<E>],
    labels: &[usize],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::contract("no samples to train the external evaluator"));
    }
    let mut opt = Adam::new(&head.params, lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 32.min(inputs.len());
    for _ in 0..epochs {
        let mut grads: GradMap<E> = GradMap::new();
        let mut picks = Vec::with_capacity(batch);
        for _ in 0..batch {
            picks.push(rng.gen_range(0..inputs.len()));
        }
        for &i in &picks {
            let mut t = Tape::<E>::new();
            let x = t.leaf(inputs[i].clone());
            let logits = head.forward_logits(&mut t, x, Binding::Trainable, None);
            let loss = t.cross_entropy_logits(logits, labels[i]);
            for (k, g) in t.backward(loss) {
                match grads.get_mut(&k) {
                    Some(acc) => crate::nn::add_assign(acc, &g),
                    None => {
                        grads.insert(k, g);
                    }
                }
            }
        }
        let scale = E::from_f64(1.0 / batch as f64);
        for g in grads.values_mut() {
            for v in g.as_slice_mut().unwrap() {
                *v = *v * scale;
            }
        }
        opt.step(&mut head.params, &grads);
    }
    Ok(())
}

/// Trains fresh heads on `held_out` (typically the validation split).
pub fn train_external_evaluator<'a, E: Element>(
    bundle: &'a NetworkBundle<E>,
    held_out: &[LabeledSample],
    epochs: usize,
    seed: u64,
) -> Result<ExternalEvaluator<'a, E>> {
    let cfg = &bundle.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE47);
    let mut z_med = Vec::with_capacity(held_out.len());
    let mut z_id = Vec::with_capacity(held_out.len());
    let mut classes = Vec::with_capacity(held_out.len());
    let mut identities = Vec::with_capacity(held_out.len());
    for s in held_out {
        let t = bundle.encode(&image_to_element::<E>(&s.image))?;
        z_med.push(t.z_med);
        z_id.push(t.z_id);
        classes.push(s.class_label);
        identities.push(s.identity_label);
    }
    let mut c_med = ClassifierHead::new_external(
        "eval_c_med",
        cfg.d_med,
        cfg.head_hidden,
        cfg.num_classes,
        &mut rng,
    );
    train_head(&mut c_med, &z_med, &classes, epochs, 1e-2, seed ^ 1)?;
    let c_id = match cfg.identity_mode {
        IdentityMode::Multiclass => {
            let mut head = ClassifierHead::new_external(
                "eval_c_id",
                cfg.d_id,
                cfg.head_hidden,
                cfg.num_identities,
                &mut rng,
            );
            train_head(&mut head, &z_id, &identities, epochs, 1e-2, seed ^ 2)?;
            Some(head)
        }
        IdentityMode::Siamese => None,
    };
    Ok(ExternalEvaluator { bundle, c_med, c_id })
}

impl<E: Element> EvalModel for ExternalEvaluator<'_, E> {
    fn encode(&self, image: &ArrayD<f64>) -> Result<LatentTriple<f64>> {
        EvalModel::encode(self.bundle, image)
    }
    fn decode(&self, triple: &LatentTriple<f64>) -> Result<ArrayD<f64>> {
        EvalModel::decode(self.bundle, triple)
    }
    fn med_probs(&self, z_med: &ArrayD<f64>) -> Result<Vec<f64>> {
        let mut t = Tape::<E>::new();
        let x = t.leaf(image_to_element::<E>(z_med));
        let logits = self.c_med.forward_logits(&mut t, x, Binding::Frozen, None);
        let p = t.softmax(logits);
        Ok(t.value(p).iter().map(|v| v.as_f64()).collect())
    }
    fn id_probs(&self, z_id: &ArrayD<f64>) -> Result<Option<Vec<f64>>> {
        match &self.c_id {
            None => Ok(None),
            Some(head) => {
                let mut t = Tape::<E>::new();
                let x = t.leaf(image_to_element::<E>(z_id));
                let logits = head.forward_logits(&mut t, x, Binding::Frozen, None);
                let p = t.softmax(logits);
                Ok(Some(t.value(p).iter().map(|v| v.as_f64()).collect()))
            }
        }
    }
}
