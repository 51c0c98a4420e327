//! Training objectives: the disentanglement, classification (multiclass and
//! Siamese), realism, discriminator and privacy losses, plus their weighted
//! combination.
//!
//! Every objective exists twice: a plain `f64` form with full contract
//! checking (used by evaluation and as the reference the tape form is tested
//! against), and a tape form the trainer differentiates through. Squared
//! vector differences are mean squared error over dimensions so the margin
//! and threshold constants stay dimension-independent; per-batch reduction is
//! the arithmetic mean everywhere.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::metrics::{self, MetricConfig};
use crate::networks::{LatentTriple, LatentVars};
use crate::nn::{Element, Tape, Var};

/// Scalar hyperparameters of the loss equations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_med: f64,
    pub lambda_id: f64,
    pub lambda_r: f64,
    pub lambda_d: f64,
    /// PSNR normalizer α.
    pub alpha: f64,
    /// Hinge constant for the Siamese and privacy losses.
    pub margin: f64,
    /// Identity-match distance threshold t.
    pub threshold_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_med: 1.0,
            lambda_id: 1.0,
            lambda_r: 1.0,
            lambda_d: 1.0,
            alpha: 48.0,
            margin: 0.1,
            threshold_t: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_med", self.lambda_med),
            ("lambda_id", self.lambda_id),
            ("lambda_r", self.lambda_r),
            ("lambda_d", self.lambda_d),
            ("alpha", self.alpha),
            ("margin", self.margin),
            ("threshold_t", self.threshold_t),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.alpha <= 0.0 {
            return Err(Error::config("alpha must be positive"));
        }
        if self.margin <= self.threshold_t {
            return Err(Error::config(format!(
                "margin ({}) must exceed threshold_t ({})",
                self.margin, self.threshold_t
            )));
        }
        Ok(())
    }
}

/// Which latent vector the disentanglement pass replaces. The residual vector
/// is never the replaced index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacedSlot {
    Identity,
    Medical,
}

fn msd(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!("vector dim mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

fn slices(t: &LatentTriple<f64>) -> [&[f64]; 3] {
    [
        t.z_id.as_slice().unwrap(),
        t.z_med.as_slice().unwrap(),
        t.z_rest.as_slice().unwrap(),
    ]
}

// ---------------------------------------------------------------------------
// plain forms
// ---------------------------------------------------------------------------

/// Mean squared error between the regenerated replaced vector and the
/// target's, plus MSE between each untouched regenerated vector and the
/// original's. Per sample; the trainer averages over the batch.
pub fn disentanglement_loss(
    ori: &LatentTriple<f64>,
    tar: &LatentTriple<f64>,
    gen: &LatentTriple<f64>,
    replaced: ReplacedSlot,
) -> Result<f64> {
    let (o, t, g) = (slices(ori), slices(tar), slices(gen));
    let i = match replaced {
        ReplacedSlot::Identity => 0,
        ReplacedSlot::Medical => 1,
    };
    let mut total = 0.0;
    for j in 0..3 {
        let reference = if j == i { t[j] } else { o[j] };
        total += msd(g[j], reference)?;
    }
    Ok(total)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-5 {
        return Err(Error::contract(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

fn cross_entropy_onehot(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::contract(format!(
            "label/class-count mismatch: {} classes vs {} labels",
            p.len(),
            y.len()
        )));
    }
    check_distribution(p, "prediction")?;
    Ok(y.iter()
        .zip(p)
        .map(|(yk, pk)| if *yk > 0.0 { -yk * pk.ln() } else { 0.0 })
        .sum())
}

/// Weighted cross-entropies of the disease and identity heads, averaged over
/// the batch. Labels are one-hot.
pub fn classification_loss_multiclass(
    c_med_out: &[Vec<f64>],
    c_id_out: &[Vec<f64>],
    y_med: &[Vec<f64>],
    y_id: &[Vec<f64>],
    w: &LossWeights,
) -> Result<f64> {
    if c_med_out.len() != y_med.len() || c_id_out.len() != y_id.len() || c_med_out.len() != c_id_out.len() {
        return Err(Error::contract("batch length mismatch in classification loss"));
    }
    if c_med_out.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut total = 0.0;
    for k in 0..c_med_out.len() {
        total += w.lambda_med * cross_entropy_onehot(&c_med_out[k], &y_med[k])?;
        total += w.lambda_id * cross_entropy_onehot(&c_id_out[k], &y_id[k])?;
    }
    Ok(total / c_med_out.len() as f64)
}

/// Disease cross-entropy plus the Siamese identity term: positive-pair
/// distance and a hinge pushing negative pairs at least `margin` apart.
pub fn classification_loss_siamese(
    c_med_out: &[Vec<f64>],
    z_id_ori: &[Vec<f64>],
    z_id_same: Option<&[Vec<f64>]>,
    z_id_tar: &[Vec<f64>],
    y_med: &[Vec<f64>],
    w: &LossWeights,
) -> Result<f64> {
    let same = z_id_same.ok_or_else(|| Error::contract("missing same-identity embedding"))?;
    let n = c_med_out.len();
    if n == 0 || same.len() != n || z_id_ori.len() != n || z_id_tar.len() != n || y_med.len() != n {
        return Err(Error::contract("batch length mismatch in siamese classification loss"));
    }
    let mut total = 0.0;
    for k in 0..n {
        let ce = cross_entropy_onehot(&c_med_out[k], &y_med[k])?;
        let pos = msd(&z_id_ori[k], &same[k])?;
        let neg = msd(&z_id_ori[k], &z_id_tar[k])?;
        total += w.lambda_med * ce + w.lambda_id * (pos + (w.margin - neg).max(0.0));
    }
    Ok(total / n as f64)
}

/// Eq.-3 realism objective on reconstructions: adversarial confidence, SSIM
/// deficit and normalized PSNR deficit, batch-averaged.
pub fn realism_loss_generator(
    disc_out_on_generated: &[f64],
    originals: &[ArrayD<f64>],
    generated: &[ArrayD<f64>],
    mcfg: &MetricConfig,
) -> Result<f64> {
    let n = disc_out_on_generated.len();
    if n == 0 || originals.len() != n || generated.len() != n {
        return Err(Error::contract("batch length mismatch in realism loss"));
    }
    let mut total = 0.0;
    for k in 0..n {
        let d = disc_out_on_generated[k];
        if !(0.0..1.0).contains(&d) || d == 0.0 {
            return Err(Error::contract(format!(
                "discriminator output {d} outside (0,1); a probability head is required"
            )));
        }
        let s = metrics::ssim(&originals[k], &generated[k], mcfg)?;
        let p = metrics::psnr(&originals[k], &generated[k], mcfg)?;
        total += -d.ln() + (1.0 - s) + (1.0 - p / mcfg.psnr_cap);
    }
    Ok(total / n as f64)
}

/// Non-saturating binary cross-entropy for the discriminator.
pub fn discriminator_loss(disc_out_real: &[f64], disc_out_generated: &[f64]) -> Result<f64> {
    let n = disc_out_real.len();
    if n == 0 || disc_out_generated.len() != n {
        return Err(Error::contract("batch length mismatch in discriminator loss"));
    }
    let mut total = 0.0;
    for k in 0..n {
        let (r, g) = (disc_out_real[k], disc_out_generated[k]);
        for v in [r, g] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("discriminator probability {v} outside [0,1]")));
            }
        }
        // exact boundary values are permitted here; the BCE limit is used
        let lr = if r > 0.0 { -r.ln() } else { f64::INFINITY };
        let lg = if g < 1.0 { -(1.0 - g).ln() } else { f64::INFINITY };
        total += lr + lg;
        if r == 1.0 {
            total = total.min(total); // -ln(1) = 0 already handled by lr
        }
    }
    Ok(total / n as f64)
}

/// Eq.-5 privacy objective per sample: identity reconstruction MSE, Gaussian
/// KL, and the negative entropy of the identity classifier on a decoded
/// random sample.
pub fn privacy_loss_multiclass(
    z_id: &[f64],
    vae_out: &[f64],
    mu: &[f64],
    logvar: &[f64],
    c_id_on_sampled: &[f64],
) -> Result<f64> {
    check_distribution(c_id_on_sampled, "c_id_on_sampled")?;
    Ok(msd(z_id, vae_out)?
        + metrics::kl_to_standard_normal(mu, logvar)?
        + metrics::entropy_term(c_id_on_sampled)?)
}

/// Eq.-7 privacy objective per sample: reconstruction and KL as in the
/// multiclass form, plus hinges pushing the decoded random sample at least
/// `margin` away from the original patient and from a randomly selected one.
pub fn privacy_loss_siamese(
    z_id: &[f64],
    z_id_other: &[f64],
    vae_out: &[f64],
    mu: &[f64],
    logvar: &[f64],
    z_sampled: &[f64],
    w: &LossWeights,
) -> Result<f64> {
    let recon = msd(z_id, vae_out)?;
    let kl = metrics::kl_to_standard_normal(mu, logvar)?;
    let h1 = (w.margin - msd(z_id, z_sampled)?).max(0.0);
    let h2 = (w.margin - msd(z_id_other, z_sampled)?).max(0.0);
    Ok(recon + kl + h1 + h2)
}

// ---------------------------------------------------------------------------
// breakdown
// ---------------------------------------------------------------------------

/// Raw per-term values entering the weighted combination.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub classification: f64,
    pub realism: f64,
    pub disentanglement: f64,
    pub adversarial: f64,
    pub ssim_term: f64,
    pub psnr_term: f64,
    pub med_ce: f64,
    pub id_term: f64,
    pub discriminator: f64,
}

/// One training step's losses; serialized as a JSON line per step.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub classification: f64,
    pub realism: f64,
    pub disentanglement: f64,
    pub total: f64,
    pub adversarial: f64,
    pub ssim_term: f64,
    pub psnr_term: f64,
    pub med_ce: f64,
    pub id_term: f64,
    pub discriminator: f64,
}

/// Combines the three top-level terms: total = classification + λ_r·realism
/// + λ_d·disentanglement.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("classification", parts.classification),
        ("realism", parts.realism),
        ("disentanglement", parts.disentanglement),
        ("adversarial", parts.adversarial),
        ("ssim_term", parts.ssim_term),
        ("psnr_term", parts.psnr_term),
        ("med_ce", parts.med_ce),
        ("id_term", parts.id_term),
        ("discriminator", parts.discriminator),
    ] {
        if !v.is_finite() {
            return Err(Error::training(format!("non-finite loss term '{name}' ({v})")));
        }
    }
    Ok(LossBreakdown {
        step: 0,
        classification: parts.classification,
        realism: parts.realism,
        disentanglement: parts.disentanglement,
        total: parts.classification + w.lambda_r * parts.realism + w.lambda_d * parts.disentanglement,
        adversarial: parts.adversarial,
        ssim_term: parts.ssim_term,
        psnr_term: parts.psnr_term,
        med_ce: parts.med_ce,
        id_term: parts.id_term,
        discriminator: parts.discriminator,
    })
}

impl LossBreakdown {
    /// Arithmetic identity of the breakdown, within 1e-6.
    pub fn check_identity(&self, w: &LossWeights) -> bool {
        let expect =
            self.classification + w.lambda_r * self.realism + w.lambda_d * self.disentanglement;
        (self.total - expect).abs() <= 1e-6 * expect.abs().max(1.0)
    }
}

// ---------------------------------------------------------------------------
// tape forms
// ---------------------------------------------------------------------------

/// Tape counterpart of [`disentanglement_loss`]; the reference triples enter
/// as constants (gradients flow only through the regenerated triple).
pub fn disentanglement_loss_tape<E: Element>(
    t: &mut Tape<E>,
    gen: LatentVars,
    ori: &LatentTriple<E>,
    tar: &LatentTriple<E>,
    replaced: ReplacedSlot,
) -> Var {
    let (id_ref, med_ref) = match replaced {
        ReplacedSlot::Identity => (&tar.z_id, &ori.z_med),
        ReplacedSlot::Medical => (&ori.z_id, &tar.z_med),
    };
    let id_leaf = t.leaf(id_ref.clone());
    let med_leaf = t.leaf(med_ref.clone());
    let rest_leaf = t.leaf(ori.z_rest.clone());
    let a = t.mse(gen.z_id, id_leaf);
    let b = t.mse(gen.z_med, med_leaf);
    let c = t.mse(gen.z_rest, rest_leaf);
    let ab = t.add(a, b);
    t.add(ab, c)
}

/// λ_med·CE(med) + λ_id·CE(id) for one sample, from logits.
pub fn classification_multiclass_tape<E: Element>(
    t: &mut Tape<E>,
    med_logits: Var,
    id_logits: Var,
    y_med: usize,
    y_id: usize,
    w: &LossWeights,
) -> ClassTerms {
    let med_ce = t.cross_entropy_logits(med_logits, y_med);
    let id_ce = t.cross_entropy_logits(id_logits, y_id);
    let a = t.scale(med_ce, E::from_f64(w.lambda_med));
    let b = t.scale(id_ce, E::from_f64(w.lambda_id));
    let total = t.add(a, b);
    ClassTerms { med_ce, id_term: id_ce, total }
}

/// λ_med·CE(med) + λ_id·(positive distance + hinge on negative distance).
pub fn classification_siamese_tape<E: Element>(
    t: &mut Tape<E>,
    med_logits: Var,
    z_id_ori: Var,
    z_id_same: Var,
    z_id_tar: Var,
    y_med: usize,
    w: &LossWeights,
) -> ClassTerms {
    let med_ce = t.cross_entropy_logits(med_logits, y_med);
    let pos = t.mse(z_id_ori, z_id_same);
    let neg = t.mse(z_id_ori, z_id_tar);
    let hinge = t.hinge(neg, E::from_f64(w.margin));
    let id_term = t.add(pos, hinge);
    let a = t.scale(med_ce, E::from_f64(w.lambda_med));
    let b = t.scale(id_term, E::from_f64(w.lambda_id));
    let total = t.add(a, b);
    ClassTerms { med_ce, id_term, total }
}

pub struct ClassTerms {
    pub med_ce: Var,
    pub id_term: Var,
    pub total: Var,
}

/// Differentiable SSIM: same Gaussian window, stabilizers and valid-position
/// aggregation as [`metrics::ssim`], built from tape convolutions.
pub fn ssim_tape<E: Element>(t: &mut Tape<E>, a: Var, b: Var, mcfg: &MetricConfig) -> Var {
    let shape = t.value(a).shape().to_vec();
    assert_eq!(shape, t.value(b).shape(), "ssim_tape shape mismatch");
    assert_eq!(shape.len(), 3, "ssim_tape expects (C,H,W)");
    let channels = shape[0];
    let win = mcfg.ssim_window;
    let weights = mcfg.gaussian_window();
    let kernel = ArrayD::from_shape_vec(
        ndarray::IxDyn(&[1, 1, win, win]),
        weights.iter().map(|v| E::from_f64(*v)).collect(),
    )
    .unwrap();
    let g = t.leaf(kernel);
    let l = mcfg.dynamic_range;
    let c1 = E::from_f64((mcfg.ssim_k1 * l) * (mcfg.ssim_k1 * l));
    let c2 = E::from_f64((mcfg.ssim_k2 * l) * (mcfg.ssim_k2 * l));
    let two = E::from_f64(2.0);

    let mut acc: Option<Var> = None;
    for ch in 0..channels {
        let ac = t.slice_channels(a, ch, 1);
        let bc = t.slice_channels(b, ch, 1);
        let mu_a = t.conv2d(ac, g, 1, 0);
        let mu_b = t.conv2d(bc, g, 1, 0);
        let aa = t.mul(ac, ac);
        let bb = t.mul(bc, bc);
        let ab = t.mul(ac, bc);
        let e_aa = t.conv2d(aa, g, 1, 0);
        let e_bb = t.conv2d(bb, g, 1, 0);
        let e_ab = t.conv2d(ab, g, 1, 0);
        let mu_a2 = t.mul(mu_a, mu_a);
        let mu_b2 = t.mul(mu_b, mu_b);
        let mu_ab = t.mul(mu_a, mu_b);
        let var_a = t.sub(e_aa, mu_a2);
        let var_b = t.sub(e_bb, mu_b2);
        let cov = t.sub(e_ab, mu_ab);
        let n1 = t.scale(mu_ab, two);
        let n1 = t.add_scalar(n1, c1);
        let n2 = t.scale(cov, two);
        let n2 = t.add_scalar(n2, c2);
        let num = t.mul(n1, n2);
        let d1 = t.add(mu_a2, mu_b2);
        let d1 = t.add_scalar(d1, c1);
        let d2 = t.add(var_a, var_b);
        let d2 = t.add_scalar(d2, c2);
        let den = t.mul(d1, d2);
        let map = t.div(num, den);
        let mean = t.mean_all(map);
        acc = Some(match acc {
            None => mean,
            Some(prev) => t.add(prev, mean),
        });
    }
    let total = acc.expect("at least one channel");
    t.scale(total, E::from_f64(1.0 / channels as f64))
}

/// Differentiable 1 − PSNR/α. When MSE is below the cap boundary the term is
/// the constant 0 (PSNR capped at α).
pub fn psnr_term_tape<E: Element>(t: &mut Tape<E>, a: Var, b: Var, mcfg: &MetricConfig) -> Var {
    let mse = t.mse(a, b);
    let mse_val = t.scalar(mse).as_f64();
    let l2 = mcfg.dynamic_range * mcfg.dynamic_range;
    // cap boundary: psnr >= cap  ⇔  mse <= L²·10^(−cap/10)
    let cap_mse = l2 * 10f64.powf(-mcfg.psnr_cap / 10.0);
    if mse_val <= cap_mse.max(1e-12) {
        return t.leaf_scalar(E::zero());
    }
    let ln_mse = t.ln(mse);
    // psnr = 10·log10(L²) − (10/ln 10)·ln(mse)
    let scaled = t.scale(ln_mse, E::from_f64(-10.0 / std::f64::consts::LN_10));
    let psnr = t.add_scalar(scaled, E::from_f64(10.0 * l2.log10()));
    let negnorm = t.scale(psnr, E::from_f64(-1.0 / mcfg.psnr_cap));
    t.add_scalar(negnorm, E::one())
}

/// −ln(p) for a discriminator probability node.
pub fn adversarial_generator_tape<E: Element>(t: &mut Tape<E>, disc_prob: Var) -> Var {
    let lp = t.ln(disc_prob);
    let s = t.sum_all(lp);
    t.scale(s, E::from_f64(-1.0))
}

/// −ln(real) − ln(1 − fake).
pub fn discriminator_loss_tape<E: Element>(t: &mut Tape<E>, real_prob: Var, fake_prob: Var) -> Var {
    let lr = adversarial_generator_tape(t, real_prob);
    let neg = t.scale(fake_prob, E::from_f64(-1.0));
    let om = t.add_scalar(neg, E::one());
    let lg = t.ln(om);
    let lg_sum = t.sum_all(lg);
    let lg_neg = t.scale(lg_sum, E::from_f64(-1.0));
    t.add(lr, lg_neg)
}

pub struct PrivacyTerms {
    pub recon: Var,
    pub kl: Var,
    pub extra: Option<Var>,
    pub total: Var,
}

/// Eq.-5 tape form. `c_id_logits_on_sampled` are the frozen identity
/// classifier's logits on the decoded random sample; `entropy_enabled` is the
/// ablation switch (off → plain VAE objective).
pub fn privacy_multiclass_tape<E: Element>(
    t: &mut Tape<E>,
    z_id: Var,
    vae_out: Var,
    mu: Var,
    logvar: Var,
    c_id_logits_on_sampled: Option<Var>,
) -> PrivacyTerms {
    let recon = t.mse(z_id, vae_out);
    let kl = t.kl_standard_normal(mu, logvar);
    let base = t.add(recon, kl);
    match c_id_logits_on_sampled {
        None => PrivacyTerms { recon, kl, extra: None, total: base },
        Some(logits) => {
            let ent = t.neg_entropy_logits(logits);
            let total = t.add(base, ent);
            PrivacyTerms { recon, kl, extra: Some(ent), total }
        }
    }
}

/// Eq.-7 tape form. `hinge_refs` carries (z_id of the original, z_id of a
/// randomly selected patient); `None` is the plain-VAE ablation.
pub fn privacy_siamese_tape<E: Element>(
    t: &mut Tape<E>,
    z_id: Var,
    vae_out: Var,
    mu: Var,
    logvar: Var,
    z_sampled: Var,
    hinge_refs: Option<(Var, Var)>,
    w: &LossWeights,
) -> PrivacyTerms {
    let recon = t.mse(z_id, vae_out);
    let kl = t.kl_standard_normal(mu, logvar);
    let base = t.add(recon, kl);
    match hinge_refs {
        None => PrivacyTerms { recon, kl, extra: None, total: base },
        Some((z_ori, z_other)) => {
            let margin = E::from_f64(w.margin);
            let d1 = t.mse(z_ori, z_sampled);
            let h1 = t.hinge(d1, margin);
            let d2 = t.mse(z_other, z_sampled);
            let h2 = t.hinge(d2, margin);
            let hs = t.add(h1, h2);
            let total = t.add(base, hs);
            PrivacyTerms { recon, kl, extra: Some(hs), total }
        }
    }
}
