//! Evaluation protocol: realism via single- and double-pass SSIM, identity
//! recognition of the original/target patients (and against the whole
//! training gallery), disease recognition, and privacy confidence — emitted
//! as report rows per experiment, with per-sample records persisted so every
//! aggregate can be audited.

pub mod ablation;
pub mod external;

use std::io::Write as _;
use std::path::Path;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::LabeledSample;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricConfig};
use crate::networks::{image_to_element, image_to_f64, siamese_distance, IdentityVae, LatentTriple, NetworkBundle};
use crate::nn::{standard_normal, Element};
use crate::training::argmax;
use crate::IdentityMode;

/// The four evaluated settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Reconstruction,
    MedicalReplacement,
    IdentityReplacement,
    Anonymization,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::Reconstruction,
        Experiment::MedicalReplacement,
        Experiment::IdentityReplacement,
        Experiment::Anonymization,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Experiment::Reconstruction => "Reconstruction / Baseline",
            Experiment::MedicalReplacement => "Medical Replacement",
            Experiment::IdentityReplacement => "Identity Replacement",
            Experiment::Anonymization => "Anonymization",
        }
    }

    /// Whose identity the generated image is expected to carry.
    pub fn expected_identity(&self) -> IdentityExpectation {
        match self {
            Experiment::Reconstruction | Experiment::MedicalReplacement => IdentityExpectation::Original,
            Experiment::IdentityReplacement => IdentityExpectation::Target,
            Experiment::Anonymization => IdentityExpectation::Nobody,
        }
    }

    /// Whose class label the disease head should predict.
    pub fn expected_class(&self) -> ClassExpectation {
        match self {
            Experiment::MedicalReplacement => ClassExpectation::Target,
            _ => ClassExpectation::Original,
        }
    }

    /// The double-pass realism score is undefined for anonymization.
    pub fn has_double_pass(&self) -> bool {
        !matches!(self, Experiment::Anonymization)
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recon" | "reconstruction" => Ok(Experiment::Reconstruction),
            "med" | "medical" => Ok(Experiment::MedicalReplacement),
            "id" | "identity" => Ok(Experiment::IdentityReplacement),
            "anon" | "anonymization" => Ok(Experiment::Anonymization),
            other => Err(Error::config(format!(
                "unknown experiment '{other}' (expected recon|med|id|anon)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityExpectation {
    Original,
    Target,
    Nobody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassExpectation {
    Original,
    Target,
}

/// Identity match decision at threshold t: strictly below means "same".
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MatchDecision {
    pub distance: f64,
    pub threshold_t: f64,
    pub same_identity: bool,
}

impl MatchDecision {
    pub fn new(distance: f64, threshold_t: f64) -> Self {
        MatchDecision { distance, threshold_t, same_identity: distance < threshold_t }
    }
}

// ---------------------------------------------------------------------------
// model abstraction
// ---------------------------------------------------------------------------

/// The minimal surface evaluation needs; implemented by [`NetworkBundle`] and
/// by test doubles.
pub trait EvalModel: Sync {
    fn encode(&self, image: &ArrayD<f64>) -> Result<LatentTriple<f64>>;
    fn decode(&self, triple: &LatentTriple<f64>) -> Result<ArrayD<f64>>;
    fn med_probs(&self, z_med: &ArrayD<f64>) -> Result<Vec<f64>>;
    /// `None` in Siamese mode (identities are matched by distance).
    fn id_probs(&self, z_id: &ArrayD<f64>) -> Result<Option<Vec<f64>>>;
}

impl<E: Element> EvalModel for NetworkBundle<E> {
    fn encode(&self, image: &ArrayD<f64>) -> Result<LatentTriple<f64>> {
        let t = NetworkBundle::encode(self, &image_to_element::<E>(image))?;
        Ok(LatentTriple {
            z_id: image_to_f64(&t.z_id),
            z_med: image_to_f64(&t.z_med),
            z_rest: image_to_f64(&t.z_rest),
        })
    }
    fn decode(&self, triple: &LatentTriple<f64>) -> Result<ArrayD<f64>> {
        let t = LatentTriple {
            z_id: image_to_element::<E>(&triple.z_id),
            z_med: image_to_element::<E>(&triple.z_med),
            z_rest: image_to_element::<E>(&triple.z_rest),
        };
        Ok(image_to_f64(&NetworkBundle::decode(self, &t)?))
    }
    fn med_probs(&self, z_med: &ArrayD<f64>) -> Result<Vec<f64>> {
        NetworkBundle::med_probs(self, &image_to_element::<E>(z_med))
    }
    fn id_probs(&self, z_id: &ArrayD<f64>) -> Result<Option<Vec<f64>>> {
        NetworkBundle::id_probs(self, &image_to_element::<E>(z_id))
    }
}

/// Source of synthetic identity vectors for the anonymization experiment.
pub trait SyntheticIdentitySampler: Sync {
    fn sample_identity(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

impl<E: Element> SyntheticIdentitySampler for IdentityVae<E> {
    fn sample_identity(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let noise = standard_normal::<E>(self.d_v, rng);
        Ok(self.decode_value(&noise)?.iter().map(|v| v.as_f64()).collect())
    }
}

// ---------------------------------------------------------------------------
// records
// ---------------------------------------------------------------------------

/// One evaluated (original, target) pair; the auditable unit every aggregate
/// is recomputed from.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SampleRecord {
    pub experiment: Experiment,
    pub index: usize,
    pub ssim_original: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_x2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dist_original: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dist_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_original: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_target: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_any_gallery: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id_confidence: Option<f64>,
    pub disease_pred: usize,
    pub disease_expected: usize,
}

/// One report row in the shape of the paper-style result tables.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalRow {
    pub experiment: Experiment,
    pub ssim_original: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_generated_x2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id_acc_original: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id_acc_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id_acc_overall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id_max_confidence: Option<f64>,
    pub disease_accuracy: f64,
    pub disease_f1: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub mode: IdentityMode,
    pub threshold_t: f64,
    pub num_pairs: usize,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
}

/// Evaluation-time knobs.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub seed: u64,
    pub threshold_t: f64,
    pub metrics: MetricConfig,
    pub mode: IdentityMode,
    /// Cap on evaluated pairs (None = whole test set).
    pub max_pairs: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            threshold_t: 0.05,
            metrics: MetricConfig::default(),
            mode: IdentityMode::Siamese,
            max_pairs: None,
        }
    }
}

/// Reference identity embeddings of the training set.
pub struct IdentityGallery {
    pub z: Vec<Vec<f64>>,
    pub identity: Vec<usize>,
}

pub fn build_gallery(model: &dyn EvalModel, samples: &[LabeledSample]) -> Result<IdentityGallery> {
    let mut z = Vec::with_capacity(samples.len());
    let mut identity = Vec::with_capacity(samples.len());
    for s in samples {
        z.push(model.encode(&s.image)?.z_id.iter().copied().collect());
        identity.push(s.identity_label);
    }
    Ok(IdentityGallery { z, identity })
}

/// Deterministic (original, target) pairs over the evaluation set; targets
/// differ in both identity and class.
pub fn build_pairs(samples: &[LabeledSample], seed: u64, max_pairs: Option<usize>) -> Result<Vec<(usize, usize)>> {
    if samples.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7A1);
    let mut pairs = Vec::new();
    let limit = max_pairs.unwrap_or(samples.len());
    for i in 0..samples.len().min(limit) {
        let candidates: Vec<usize> = (0..samples.len())
            .filter(|&j| {
                samples[j].identity_label != samples[i].identity_label
                    && samples[j].class_label != samples[i].class_label
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::contract(format!(
                "no valid target for evaluation sample {i} (identity {}, class {})",
                samples[i].identity_label, samples[i].class_label
            )));
        }
        pairs.push((i, candidates[rng.gen_range(0..candidates.len())]));
    }
    Ok(pairs)
}

/// Generates the per-pair record for one experiment.
#[allow(clippy::too_many_arguments)]
fn evaluate_pair(
    model: &dyn EvalModel,
    vae: Option<&dyn SyntheticIdentitySampler>,
    samples: &[LabeledSample],
    gallery: Option<&IdentityGallery>,
    experiment: Experiment,
    pair: (usize, usize),
    cfg: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampleRecord> {
    let (oi, ti) = pair;
    let original = &samples[oi];
    let target = &samples[ti];
    let tri_o = model.encode(&original.image)?;
    let tri_t = model.encode(&target.image)?;

    // first pass
    let gen1 = match experiment {
        Experiment::Reconstruction => model.decode(&tri_o)?,
        Experiment::MedicalReplacement => model.decode(&LatentTriple {
            z_id: tri_o.z_id.clone(),
            z_med: tri_t.z_med.clone(),
            z_rest: tri_o.z_rest.clone(),
        })?,
        Experiment::IdentityReplacement => model.decode(&LatentTriple {
            z_id: tri_t.z_id.clone(),
            z_med: tri_o.z_med.clone(),
            z_rest: tri_o.z_rest.clone(),
        })?,
        Experiment::Anonymization => {
            let sampler = vae.ok_or_else(|| {
                Error::contract("anonymization evaluation requires a trained identity VAE")
            })?;
            let synth = sampler.sample_identity(rng)?;
            model.decode(&LatentTriple {
                z_id: ArrayD::from_shape_vec(ndarray::IxDyn(&[synth.len()]), synth).unwrap(),
                z_med: tri_o.z_med.clone(),
                z_rest: tri_o.z_rest.clone(),
            })?
        }
    };

    // second pass re-applies the same replacement toward the same target
    let ssim_x2 = if experiment.has_double_pass() {
        let tri_g = model.encode(&gen1)?;
        let gen2 = match experiment {
            Experiment::Reconstruction => model.decode(&tri_g)?,
            Experiment::MedicalReplacement => model.decode(&LatentTriple {
                z_id: tri_g.z_id.clone(),
                z_med: tri_t.z_med.clone(),
                z_rest: tri_g.z_rest.clone(),
            })?,
            Experiment::IdentityReplacement => model.decode(&LatentTriple {
                z_id: tri_t.z_id.clone(),
                z_med: tri_g.z_med.clone(),
                z_rest: tri_g.z_rest.clone(),
            })?,
            Experiment::Anonymization => unreachable!(),
        };
        Some(metrics::ssim(&gen1, &gen2, &cfg.metrics)?)
    } else {
        None
    };

    let ssim_original = metrics::ssim(&original.image, &gen1, &cfg.metrics)?;

    // identity recognition on the re-encoded generated image
    let tri_gen = model.encode(&gen1)?;
    let z_gen: Vec<f64> = tri_gen.z_id.iter().copied().collect();
    let (dist_original, dist_target, matched_original, matched_target, matched_any, id_confidence);
    match model.id_probs(&tri_gen.z_id)? {
        Some(probs) => {
            let pred = argmax(&probs);
            matched_original = Some(pred == original.identity_label);
            matched_target = Some(pred == target.identity_label);
            id_confidence = Some(probs[pred]);
            dist_original = None;
            dist_target = None;
            matched_any = None;
        }
        None => {
            let z_o: Vec<f64> = tri_o.z_id.iter().copied().collect();
            let z_t: Vec<f64> = tri_t.z_id.iter().copied().collect();
            let d_o = siamese_distance(&z_gen, &z_o)?;
            let d_t = siamese_distance(&z_gen, &z_t)?;
            dist_original = Some(d_o);
            dist_target = Some(d_t);
            matched_original = Some(MatchDecision::new(d_o, cfg.threshold_t).same_identity);
            matched_target = Some(MatchDecision::new(d_t, cfg.threshold_t).same_identity);
            matched_any = match gallery {
                Some(g) => {
                    let mut any = false;
                    for zg in &g.z {
                        if MatchDecision::new(siamese_distance(&z_gen, zg)?, cfg.threshold_t).same_identity {
                            any = true;
                            break;
                        }
                    }
                    Some(any)
                }
                None => None,
            };
            id_confidence = None;
        }
    }

    // disease recognition
    let probs = model.med_probs(&tri_gen.z_med)?;
    let disease_pred = argmax(&probs);
    let disease_expected = match experiment.expected_class() {
        ClassExpectation::Original => original.class_label,
        ClassExpectation::Target => target.class_label,
    };

    Ok(SampleRecord {
        experiment,
        index: oi,
        ssim_original,
        ssim_x2,
        dist_original,
        dist_target,
        matched_original,
        matched_target,
        matched_any_gallery: matched_any,
        id_confidence,
        disease_pred,
        disease_expected,
    })
}

/// Exact-count aggregation of one experiment's records into a report row.
pub fn aggregate_records(experiment: Experiment, records: &[SampleRecord]) -> Result<EvalRow> {
    let recs: Vec<&SampleRecord> = records.iter().filter(|r| r.experiment == experiment).collect();
    if recs.is_empty() {
        return Err(Error::contract(format!("no records for {:?}", experiment)));
    }
    let n = recs.len() as f64;
    let frac = |f: &dyn Fn(&SampleRecord) -> Option<bool>| -> Option<f64> {
        let hits: Vec<bool> = recs.iter().filter_map(|r| f(r)).collect();
        if hits.is_empty() {
            None
        } else {
            Some(hits.iter().filter(|b| **b).count() as f64 / hits.len() as f64)
        }
    };
    let ssim_original = recs.iter().map(|r| r.ssim_original).sum::<f64>() / n;
    let x2: Vec<f64> = recs.iter().filter_map(|r| r.ssim_x2).collect();
    let ssim_generated_x2 = if x2.is_empty() {
        None
    } else {
        Some(x2.iter().sum::<f64>() / x2.len() as f64)
    };
    let conf: Vec<f64> = recs.iter().filter_map(|r| r.id_confidence).collect();
    let id_max_confidence = if conf.is_empty() {
        None
    } else {
        Some(conf.iter().sum::<f64>() / conf.len() as f64)
    };
    let disease_hits = recs.iter().filter(|r| r.disease_pred == r.disease_expected).count();
    // positive-class F1 (label 1); all tasks in scope are binary
    let tp = recs.iter().filter(|r| r.disease_pred == 1 && r.disease_expected == 1).count();
    let fp = recs.iter().filter(|r| r.disease_pred == 1 && r.disease_expected != 1).count();
    let fneg = recs.iter().filter(|r| r.disease_pred != 1 && r.disease_expected == 1).count();
    let f1 = if 2 * tp + fp + fneg == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    Ok(EvalRow {
        experiment,
        ssim_original,
        ssim_generated_x2,
        id_acc_original: frac(&|r| r.matched_original),
        id_acc_target: frac(&|r| r.matched_target),
        id_acc_overall: frac(&|r| r.matched_any_gallery),
        id_max_confidence,
        disease_accuracy: disease_hits as f64 / n,
        disease_f1: f1,
    })
}

/// Runs the requested experiments and returns (report, per-pair records).
pub fn run_report(
    model: &dyn EvalModel,
    vae: Option<&dyn SyntheticIdentitySampler>,
    eval_set: &[LabeledSample],
    gallery_set: &[LabeledSample],
    experiments: &[Experiment],
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<SampleRecord>)> {
    if eval_set.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let gallery = match cfg.mode {
        IdentityMode::Siamese => Some(build_gallery(model, gallery_set)?),
        IdentityMode::Multiclass => None,
    };
    let pairs = build_pairs(eval_set, cfg.seed, cfg.max_pairs)?;
    let mut records = Vec::new();
    for experiment in experiments {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA011);
        for pair in &pairs {
            records.push(evaluate_pair(
                model,
                vae,
                eval_set,
                gallery.as_ref(),
                *experiment,
                *pair,
                cfg,
                &mut rng,
            )?);
        }
    }
    let rows = experiments
        .iter()
        .map(|e| aggregate_records(*e, &records))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        EvalReport {
            mode: cfg.mode,
            threshold_t: cfg.threshold_t,
            num_pairs: pairs.len(),
            seed: cfg.seed,
            rows,
        },
        records,
    ))
}

// spec-shaped convenience wrappers over the shared record path

/// Mean SSIM(original, generated) and mean SSIM(generated-once,
/// generated-twice) for one experiment.
pub fn realism_eval(
    model: &dyn EvalModel,
    vae: Option<&dyn SyntheticIdentitySampler>,
    eval_set: &[LabeledSample],
    experiment: Experiment,
    cfg: &EvalConfig,
) -> Result<(f64, Option<f64>)> {
    let (report, _) = run_report(model, vae, eval_set, &[], &[experiment], cfg)?;
    Ok((report.rows[0].ssim_original, report.rows[0].ssim_generated_x2))
}

pub struct IdentityEvalOutcome {
    pub acc_original: Option<f64>,
    pub acc_target: Option<f64>,
    pub acc_overall: Option<f64>,
    pub max_confidence: Option<f64>,
}

/// Identity recognition accuracies of the generated images.
pub fn identity_eval(
    model: &dyn EvalModel,
    vae: Option<&dyn SyntheticIdentitySampler>,
    eval_set: &[LabeledSample],
    gallery_set: &[LabeledSample],
    experiment: Experiment,
    cfg: &EvalConfig,
) -> Result<IdentityEvalOutcome> {
    if cfg.mode == IdentityMode::Siamese && gallery_set.is_empty() {
        return Err(Error::contract("siamese identity evaluation needs a reference gallery"));
    }
    let (report, _) = run_report(model, vae, eval_set, gallery_set, &[experiment], cfg)?;
    let row = &report.rows[0];
    Ok(IdentityEvalOutcome {
        acc_original: row.id_acc_original,
        acc_target: row.id_acc_target,
        acc_overall: row.id_acc_overall,
        max_confidence: row.id_max_confidence,
    })
}

/// Disease-recognition accuracy and positive-class F1 on generated images.
pub fn disease_eval(
    model: &dyn EvalModel,
    vae: Option<&dyn SyntheticIdentitySampler>,
    eval_set: &[LabeledSample],
    experiment: Experiment,
    cfg: &EvalConfig,
) -> Result<(f64, f64)> {
    let (report, _) = run_report(model, vae, eval_set, &[], &[experiment], cfg)?;
    Ok((report.rows[0].disease_accuracy, report.rows[0].disease_f1))
}

// ---------------------------------------------------------------------------
// output formats
// ---------------------------------------------------------------------------

pub fn write_records_jsonl(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).expect("serializable record");
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::contract(format!("bad record line: {e}"))))
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "-".to_string())
}

/// Aligned-column text table in the shape of the paper's result tables.
pub fn format_text_table(report: &EvalReport) -> String {
    let headers = [
        "Experiment",
        "SSIM Orig",
        "SSIM Genx2",
        "ID Orig",
        "ID Target",
        "ID Overall",
        "Max Conf",
        "Disease Acc",
        "F1",
    ];
    let mut rows: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
    for r in &report.rows {
        rows.push(vec![
            r.experiment.label().to_string(),
            pct(r.ssim_original),
            opt_pct(r.ssim_generated_x2),
            opt_pct(r.id_acc_original),
            opt_pct(r.id_acc_target),
            opt_pct(r.id_acc_overall),
            opt_pct(r.id_max_confidence),
            pct(r.disease_accuracy),
            pct(r.disease_f1),
        ]);
    }
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

/// PNG contact sheet: one row per sample, columns (original | reconstruction
/// | medical-replaced | identity-replaced | anonymized).
pub fn write_contact_sheet(
    model: &dyn EvalModel,
    vae: Option<&dyn SyntheticIdentitySampler>,
    eval_set: &[LabeledSample],
    path: &Path,
    seed: u64,
    max_rows: usize,
) -> Result<()> {
    if eval_set.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let pairs = build_pairs(eval_set, seed, Some(max_rows))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EE7);
    let shape = eval_set[0].image.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let cols = if vae.is_some() { 5 } else { 4 };
    let gap = 2usize;
    let sheet_w = cols * w + (cols - 1) * gap;
    let sheet_h = pairs.len() * h + (pairs.len() - 1) * gap;
    let mut sheet = vec![255u8; sheet_w * sheet_h];

    let blit = |img: &ArrayD<f64>, row: usize, col: usize, sheet: &mut Vec<u8>| {
        let base_y = row * (h + gap);
        let base_x = col * (w + gap);
        let v = img.as_slice().unwrap();
        for y in 0..h {
            for x in 0..w {
                sheet[(base_y + y) * sheet_w + base_x + x] =
                    (v[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    };

    for (row, (oi, ti)) in pairs.iter().enumerate() {
        let original = &eval_set[*oi];
        let target = &eval_set[*ti];
        let tri_o = model.encode(&original.image)?;
        let tri_t = model.encode(&target.image)?;
        let recon = model.decode(&tri_o)?;
        let med = model.decode(&LatentTriple {
            z_id: tri_o.z_id.clone(),
            z_med: tri_t.z_med.clone(),
            z_rest: tri_o.z_rest.clone(),
        })?;
        let idr = model.decode(&LatentTriple {
            z_id: tri_t.z_id.clone(),
            z_med: tri_o.z_med.clone(),
            z_rest: tri_o.z_rest.clone(),
        })?;
        blit(&original.image, row, 0, &mut sheet);
        blit(&recon, row, 1, &mut sheet);
        blit(&med, row, 2, &mut sheet);
        blit(&idr, row, 3, &mut sheet);
        if let Some(sampler) = vae {
            let synth = sampler.sample_identity(&mut rng)?;
            let anon = model.decode(&LatentTriple {
                z_id: ArrayD::from_shape_vec(ndarray::IxDyn(&[synth.len()]), synth).unwrap(),
                z_med: tri_o.z_med.clone(),
                z_rest: tri_o.z_rest.clone(),
            })?;
            blit(&anon, row, 4, &mut sheet);
        }
    }
    let img = image::GrayImage::from_raw(sheet_w as u32, sheet_h as u32, sheet)
        .ok_or_else(|| Error::contract("contact sheet buffer mismatch"))?;
    img.save(path)
        .map_err(|e| Error::ingestion(format!("failed to write {}: {e}", path.display())))
}
