//! Datasets: synthetic factor-labeled generation, directory-of-images
//! ingestion, split management and training-triplet sampling.

pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
pub use synth::{LesionFactors, SampleFactors};
use crate::IdentityMode;

/// Nuisance factor ranges of the synthetic generator.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NuisanceSpec {
    pub translation_px: f64,
    pub rotation_deg: f64,
    pub brightness_jitter: f64,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        NuisanceSpec { translation_px: 2.0, rotation_deg: 8.0, brightness_jitter: 0.1 }
    }
}

/// Controls of the synthetic factor dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FactorSpec {
    pub num_identities: usize,
    pub num_classes: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Total sample count, spread uniformly over identity×class cells.
    pub samples: usize,
    pub nuisance: NuisanceSpec,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for FactorSpec {
    fn default() -> Self {
        FactorSpec {
            num_identities: 8,
            num_classes: 2,
            image_size: 32,
            samples: 1000,
            nuisance: NuisanceSpec::default(),
            seed: 0,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 3 {
            return Err(Error::config(format!(
                "num_identities must be >= 3 (need original, target and another), got {}",
                self.num_identities
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.image_size < 16 {
            return Err(Error::config(format!("image_size must be >= 16, got {}", self.image_size)));
        }
        if self.samples < self.num_identities * self.num_classes {
            return Err(Error::config(format!(
                "samples ({}) must cover every identity×class cell ({})",
                self.samples,
                self.num_identities * self.num_classes
            )));
        }
        if self.nuisance.translation_px < 0.0
            || self.nuisance.rotation_deg < 0.0
            || !(0.0..1.0).contains(&self.nuisance.brightness_jitter)
        {
            return Err(Error::config("nuisance ranges must be nonnegative (jitter in [0,1))"));
        }
        if self.train_fraction <= 0.0
            || self.val_fraction < 0.0
            || self.train_fraction + self.val_fraction >= 1.0
        {
            return Err(Error::config(format!(
                "split fractions invalid: train {} + val {} must be < 1",
                self.train_fraction, self.val_fraction
            )));
        }
        Ok(())
    }
}

/// One image with its identity and class annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// (C, H, W) pixel intensities in [0,1].
    pub image: ArrayD<f64>,
    pub identity_label: usize,
    pub class_label: usize,
    /// Opaque key grouping samples of one identity.
    pub patient_key: String,
}

/// Disjoint train/validation/test sample lists.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub num_identities: usize,
    pub num_classes: usize,
}

/// Fraction of class-1 samples (the paper's tasks are binary).
pub fn class_ratio(samples: &[LabeledSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| s.class_label == 1).count() as f64 / samples.len() as f64
}

/// A training triplet borrowed from its split.
#[derive(Debug, Clone, Copy)]
pub struct TrainingTriplet<'a> {
    pub original: &'a LabeledSample,
    pub target: &'a LabeledSample,
    /// Present iff sampling ran in Siamese mode.
    pub same_identity: Option<&'a LabeledSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SplitTag {
    Train,
    Validation,
    Test,
}

impl SplitTag {
    fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        }
    }
}

// ---------------------------------------------------------------------------
// synthetic generation
// ---------------------------------------------------------------------------

fn cell_assignments(spec: &FactorSpec) -> Vec<(usize, usize)> {
    // round-robin over identities, then classes: every cell receives
    // floor(n/IC) or one more
    (0..spec.samples)
        .map(|s| {
            let identity = s % spec.num_identities;
            let class = (s / spec.num_identities) % spec.num_classes;
            (identity, class)
        })
        .collect()
}

fn split_for_cell_position(position: usize, cell_total: usize, spec: &FactorSpec) -> SplitTag {
    // per-cell proportional split keeps identities present in every split and
    // the class ratio exact up to rounding
    let n_train = ((cell_total as f64) * spec.train_fraction).round() as usize;
    let n_val = ((cell_total as f64) * spec.val_fraction).round() as usize;
    let n_train = n_train.min(cell_total);
    let n_val = n_val.min(cell_total - n_train);
    if position < n_train {
        SplitTag::Train
    } else if position < n_train + n_val {
        SplitTag::Validation
    } else {
        SplitTag::Test
    }
}

fn generate_all(spec: &FactorSpec) -> Result<Vec<(LabeledSample, SampleFactors)>> {
    spec.validate()?;
    let cells = cell_assignments(spec);
    let mut cell_seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut cell_totals: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for key in &cells {
        *cell_totals.entry(*key).or_insert(0) += 1;
    }
    let mut out = Vec::with_capacity(spec.samples);
    for (index, (identity, class)) in cells.iter().enumerate() {
        let position = {
            let seen = cell_seen.entry((*identity, *class)).or_insert(0);
            let p = *seen;
            *seen += 1;
            p
        };
        let tag = split_for_cell_position(position, cell_totals[&(*identity, *class)], spec);
        let rendered = synth::render_sample(spec, *identity, *class, index);
        let sample = LabeledSample {
            image: rendered.image,
            identity_label: *identity,
            class_label: *class,
            patient_key: format!("id{identity:03}"),
        };
        let factors = SampleFactors {
            index,
            file: format!("images/{index:05}.png"),
            identity: *identity,
            class: *class,
            split: tag.as_str().to_string(),
            translate: rendered.translate,
            rotation_deg: rendered.rotation_deg,
            brightness: rendered.brightness,
            lesions: rendered.lesions,
        };
        out.push((sample, factors));
    }
    Ok(out)
}

/// Generates the synthetic dataset in memory. Pure function of the spec:
/// identical specs yield identical pixels.
pub fn generate_synthetic(spec: &FactorSpec) -> Result<DatasetSplit> {
    let all = generate_all(spec)?;
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        num_identities: spec.num_identities,
        num_classes: spec.num_classes,
    };
    for (sample, factors) in all {
        match factors.split.as_str() {
            "train" => split.train.push(sample),
            "validation" => split.validation.push(sample),
            _ => split.test.push(sample),
        }
    }
    Ok(split)
}

/// Emits the dataset as `images/*.png` + `manifest.csv` + `factors.json`.
/// Byte-deterministic for a fixed spec.
pub fn write_synthetic_dataset(spec: &FactorSpec, out_dir: &Path) -> Result<()> {
    let all = generate_all(spec)?;
    fs::create_dir_all(out_dir.join("images"))?;
    let mut manifest = String::from("path,identity,class,split\n");
    let mut factor_records = Vec::with_capacity(all.len());
    for (sample, factors) in &all {
        save_png_gray(&out_dir.join(&factors.file), &sample.image)?;
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            factors.file, sample.identity_label, sample.class_label, factors.split
        ));
        factor_records.push(factors.clone());
    }
    fs::write(out_dir.join("manifest.csv"), manifest)?;
    let doc = serde_json::json!({ "spec": spec, "samples": factor_records });
    fs::write(out_dir.join("factors.json"), serde_json::to_string_pretty(&doc).unwrap())?;
    Ok(())
}

/// 8-bit grayscale PNG writer for (1,H,W) images in [0,1].
pub fn save_png_gray(path: &Path, image: &ArrayD<f64>) -> Result<()> {
    let shape = image.shape();
    let (h, w) = match shape {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => return Err(Error::contract(format!("expected grayscale image, got {other:?}"))),
    };
    let bytes: Vec<u8> = image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::contract("image buffer size mismatch"))?;
    img.save(path)
        .map_err(|e| Error::ingestion(format!("failed to write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// directory ingestion
// ---------------------------------------------------------------------------

/// Options of [`load_directory_dataset`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub image_size: usize,
    pub channels: usize,
    /// Seed of the fallback split when the manifest has no split column.
    pub seed: u64,
    /// Keep each identity inside a single split (re-identification evaluation
    /// would be trivially leaky otherwise). Override for datasets where the
    /// same patients appear in every split.
    pub identity_disjoint_splits: bool,
    /// Require at least two samples per identity (Siamese training).
    pub siamese: bool,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            image_size: 32,
            channels: 1,
            seed: 0,
            identity_disjoint_splits: true,
            siamese: false,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

fn load_png(path: &Path, channels: usize, size: usize) -> Result<ArrayD<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::ingestion(format!("cannot open image {}: {e}", path.display())))?;
    let img = img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle);
    let mut data = vec![0.0f64; channels * size * size];
    match channels {
        1 => {
            let g = img.to_luma8();
            for (i, p) in g.pixels().enumerate() {
                data[i] = p.0[0] as f64 / 255.0;
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            let plane = size * size;
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = p.0[c] as f64 / 255.0;
                }
            }
        }
        other => return Err(Error::config(format!("unsupported channel count {other}"))),
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[channels, size, size]), data).unwrap())
}

struct ManifestRow {
    path: String,
    identity: String,
    class: usize,
    split: Option<String>,
}

fn read_manifest_rows(manifest_path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(manifest_path)
        .map_err(|e| Error::ingestion(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::ingestion(format!("bad manifest header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (pi, ii, ci) = match (col("path"), col("identity"), col("class")) {
        (Some(p), Some(i), Some(c)) => (p, i, c),
        _ => {
            return Err(Error::ingestion(
                "manifest must have header columns path,identity,class[,split]",
            ))
        }
    };
    let si = col("split");
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::ingestion(format!("manifest row {line}: {e}")))?;
        let class: usize = record
            .get(ci)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::ingestion(format!("manifest row {line}: class is not an integer")))?;
        rows.push(ManifestRow {
            path: record.get(pi).unwrap_or("").trim().to_string(),
            identity: record.get(ii).unwrap_or("").trim().to_string(),
            class,
            split: si.and_then(|s| record.get(s)).map(|v| v.trim().to_string()),
        });
    }
    Ok(rows)
}

/// Greedy identity-level split targeting the configured fractions while
/// keeping each split's class ratio near the global one, with a local
/// refinement pass. Deterministic for a fixed seed.
fn identity_stratified_split(
    groups: &[(String, Vec<usize>, usize, usize)], // (key, sample indices, n_class1, n_total)
    fractions: [f64; 3],
    seed: u64,
) -> Vec<SplitTag> {
    let total: usize = groups.iter().map(|g| g.3).sum();
    let global_ratio = groups.iter().map(|g| g.2).sum::<usize>() as f64 / total.max(1) as f64;
    let tags = [SplitTag::Train, SplitTag::Validation, SplitTag::Test];

    // sort identities by their class-1 fraction (spreads the ratio), then by
    // size descending for stable packing
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by(|&a, &b| {
        let ra = groups[a].2 as f64 / groups[a].3 as f64;
        let rb = groups[b].2 as f64 / groups[b].3 as f64;
        rb.partial_cmp(&ra).unwrap().then(groups[b].3.cmp(&groups[a].3))
    });

    let mut assign = vec![SplitTag::Train; groups.len()];
    let mut size = [0usize; 3];
    let mut ones = [0usize; 3];
    for &g in &order {
        // pick the split with the largest size deficit; tie-break on the
        // class-ratio deviation the assignment would produce
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for s in 0..3 {
            if fractions[s] <= 0.0 {
                continue;
            }
            let target = fractions[s] * total as f64;
            let overshoot = (size[s] + groups[g].3) as f64 - target;
            let new_ratio = (ones[s] + groups[g].2) as f64 / (size[s] + groups[g].3) as f64;
            let cost = overshoot / target.max(1.0) + 0.25 * (new_ratio - global_ratio).abs();
            if cost < best_cost {
                best_cost = cost;
                best = s;
            }
        }
        assign[g] = tags[best];
        size[best] += groups[g].3;
        ones[best] += groups[g].2;
    }

    // refinement: swap identities between splits while it reduces the worst
    // class-ratio deviation
    for _ in 0..4 {
        let deviation = |size: &[usize; 3], ones: &[usize; 3]| -> f64 {
            (0..3)
                .filter(|&s| size[s] > 0)
                .map(|s| (ones[s] as f64 / size[s] as f64 - global_ratio).abs())
                .fold(0.0, f64::max)
        };
        let before = deviation(&size, &ones);
        if before <= 0.015 {
            break;
        }
        let mut improved = false;
        'outer: for a in 0..groups.len() {
            for b in (a + 1)..groups.len() {
                let (sa, sb) = (assign[a], assign[b]);
                if sa == sb {
                    continue;
                }
                let (ia, ib) = (
                    tags.iter().position(|t| *t == sa).unwrap(),
                    tags.iter().position(|t| *t == sb).unwrap(),
                );
                let mut nsize = size;
                let mut nones = ones;
                nsize[ia] = nsize[ia] - groups[a].3 + groups[b].3;
                nones[ia] = nones[ia] - groups[a].2 + groups[b].2;
                nsize[ib] = nsize[ib] - groups[b].3 + groups[a].3;
                nones[ib] = nones[ib] - groups[b].2 + groups[a].2;
                if deviation(&nsize, &nones) + 1e-9 < deviation(&size, &ones) {
                    assign.swap(a, b);
                    size = nsize;
                    ones = nones;
                    improved = true;
                    break 'outer;
                }
            }
        }
        if !improved {
            break;
        }
    }
    assign
}

/// Loads a directory dataset described by a CSV manifest with header
/// `path,identity,class[,split]`. Splits honor the split column when present,
/// otherwise a seeded identity-stratified split is applied.
pub fn load_directory_dataset(
    root: &Path,
    manifest_path: &Path,
    opts: &LoadOptions,
) -> Result<DatasetSplit> {
    let rows = read_manifest_rows(manifest_path)?;
    if rows.is_empty() {
        return Err(Error::ingestion("manifest has no rows"));
    }
    // dense identity ids by first appearance
    let mut id_map: BTreeMap<String, usize> = BTreeMap::new();
    for row in &rows {
        let next = id_map.len();
        id_map.entry(row.identity.clone()).or_insert(next);
    }
    let num_classes = rows.iter().map(|r| r.class).max().unwrap() + 1;

    let mut samples = Vec::with_capacity(rows.len());
    for row in &rows {
        let path = root.join(&row.path);
        if !path.exists() {
            return Err(Error::ingestion(format!("missing image file: {}", path.display())));
        }
        let image = load_png(&path, opts.channels, opts.image_size)?;
        samples.push(LabeledSample {
            image,
            identity_label: id_map[&row.identity],
            class_label: row.class,
            patient_key: row.identity.clone(),
        });
    }

    if opts.siamese {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &samples {
            *counts.entry(s.patient_key.as_str()).or_insert(0) += 1;
        }
        if let Some((key, _)) = counts.iter().find(|(_, c)| **c < 2) {
            return Err(Error::ingestion(format!(
                "identity '{key}' has fewer than 2 samples; Siamese mode needs same-patient pairs"
            )));
        }
    }

    let has_split = rows.iter().all(|r| r.split.as_deref().map(|s| !s.is_empty()).unwrap_or(false));
    let tags: Vec<SplitTag> = if has_split {
        rows.iter()
            .map(|r| match r.split.as_deref().unwrap() {
                "train" => Ok(SplitTag::Train),
                "val" | "validation" => Ok(SplitTag::Validation),
                "test" => Ok(SplitTag::Test),
                other => Err(Error::ingestion(format!("unknown split label '{other}'"))),
            })
            .collect::<Result<_>>()?
    } else if opts.identity_disjoint_splits {
        let mut groups: BTreeMap<String, (Vec<usize>, usize, usize)> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            let e = groups.entry(s.patient_key.clone()).or_default();
            e.0.push(i);
            e.1 += usize::from(s.class_label == 1);
            e.2 += 1;
        }
        let groups: Vec<(String, Vec<usize>, usize, usize)> = groups
            .into_iter()
            .map(|(k, (idx, ones, n))| (k, idx, ones, n))
            .collect();
        let assignment = identity_stratified_split(
            &groups,
            [opts.train_fraction, opts.val_fraction, 1.0 - opts.train_fraction - opts.val_fraction],
            opts.seed,
        );
        let mut tags = vec![SplitTag::Train; samples.len()];
        for (g, tag) in groups.iter().zip(assignment.iter()) {
            for &i in &g.1 {
                tags[i] = *tag;
            }
        }
        tags
    } else {
        // per-class proportional split at the sample level
        let mut tags = vec![SplitTag::Train; samples.len()];
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.class_label).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for (_, mut idx) in by_class {
            idx.shuffle(&mut rng);
            let n = idx.len();
            let n_train = (n as f64 * opts.train_fraction).round() as usize;
            let n_val = (n as f64 * opts.val_fraction).round() as usize;
            for (pos, &i) in idx.iter().enumerate() {
                tags[i] = if pos < n_train {
                    SplitTag::Train
                } else if pos < (n_train + n_val).min(n) {
                    SplitTag::Validation
                } else {
                    SplitTag::Test
                };
            }
        }
        tags
    };

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        num_identities: id_map.len(),
        num_classes,
    };
    for (sample, tag) in samples.into_iter().zip(tags) {
        match tag {
            SplitTag::Train => split.train.push(sample),
            SplitTag::Validation => split.validation.push(sample),
            SplitTag::Test => split.test.push(sample),
        }
    }
    Ok(split)
}

// ---------------------------------------------------------------------------
// triplet sampling
// ---------------------------------------------------------------------------

/// Draws one training triplet from `pool`: a uniformly chosen original, a
/// uniformly chosen target with different identity AND class, and (Siamese
/// mode) another sample of the original's patient.
pub fn sample_triplet<'a>(
    pool: &'a [LabeledSample],
    mode: IdentityMode,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingTriplet<'a>> {
    if pool.is_empty() {
        return Err(Error::sampling("empty sample pool"));
    }
    let eligible: Vec<usize> = match mode {
        IdentityMode::Multiclass => (0..pool.len()).collect(),
        IdentityMode::Siamese => {
            // identities with a single sample cannot serve as the original
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for s in pool {
                *counts.entry(s.patient_key.as_str()).or_insert(0) += 1;
            }
            (0..pool.len())
                .filter(|&i| counts[pool[i].patient_key.as_str()] >= 2)
                .collect()
        }
    };
    if eligible.is_empty() {
        return Err(Error::sampling(
            "no identity has two samples; Siamese mode cannot pick an original",
        ));
    }
    let original_idx = eligible[rng.gen_range(0..eligible.len())];
    let original = &pool[original_idx];

    let targets: Vec<usize> = (0..pool.len())
        .filter(|&i| {
            pool[i].identity_label != original.identity_label
                && pool[i].class_label != original.class_label
        })
        .collect();
    if targets.is_empty() {
        return Err(Error::sampling(format!(
            "no target with identity != {} and class != {} exists",
            original.identity_label, original.class_label
        )));
    }
    let target = &pool[targets[rng.gen_range(0..targets.len())]];

    let same_identity = match mode {
        IdentityMode::Multiclass => None,
        IdentityMode::Siamese => {
            let sames: Vec<usize> = (0..pool.len())
                .filter(|&i| i != original_idx && pool[i].patient_key == original.patient_key)
                .collect();
            if sames.is_empty() {
                return Err(Error::sampling(format!(
                    "identity '{}' has no second sample",
                    original.patient_key
                )));
            }
            Some(&pool[sames[rng.gen_range(0..sames.len())]])
        }
    };

    Ok(TrainingTriplet { original, target, same_identity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy_spec() -> FactorSpec {
        FactorSpec {
            num_identities: 3,
            num_classes: 2,
            image_size: 16,
            samples: 200,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn invalid_specs_name_the_violated_bound() {
        let mut s = toy_spec();
        s.num_identities = 2;
        match generate_synthetic(&s) {
            Err(Error::Config(msg)) => assert!(msg.contains("num_identities")),
            other => panic!("expected config error, got {other:?}"),
        }
        let mut s = toy_spec();
        s.image_size = 8;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
        let mut s = toy_spec();
        s.num_classes = 1;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = toy_spec();
        let a = generate_synthetic(&s).unwrap();
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn every_identity_appears_in_both_classes() {
        let split = generate_synthetic(&toy_spec()).unwrap();
        let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
        for s in split.train.iter().chain(&split.validation).chain(&split.test) {
            seen.insert((s.identity_label, s.class_label));
        }
        for id in 0..3 {
            for class in 0..2 {
                assert!(seen.contains(&(id, class)), "identity {id} missing class {class}");
            }
        }
    }

    #[test]
    fn pixels_in_unit_range_and_splits_sized() {
        let s = toy_spec();
        let split = generate_synthetic(&s).unwrap();
        let total = split.train.len() + split.validation.len() + split.test.len();
        assert_eq!(total, s.samples);
        assert!(split.train.len() > split.test.len());
        for sample in split.train.iter().chain(&split.validation).chain(&split.test) {
            assert!(sample.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn class_ratio_preserved_across_splits() {
        let s = FactorSpec { samples: 400, num_identities: 4, ..toy_spec() };
        let split = generate_synthetic(&s).unwrap();
        let global = 0.5; // balanced cells by construction
        for part in [&split.train, &split.validation, &split.test] {
            assert!((class_ratio(part) - global).abs() <= 0.02, "ratio {} off", class_ratio(part));
        }
    }

    #[test]
    fn triplet_invariants_over_1000_draws() {
        let split = generate_synthetic(&FactorSpec { samples: 240, num_identities: 4, ..toy_spec() })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = sample_triplet(&split.train, IdentityMode::Siamese, &mut rng).unwrap();
            assert_ne!(t.original.identity_label, t.target.identity_label);
            assert_ne!(t.original.class_label, t.target.class_label);
            let same = t.same_identity.expect("siamese triplet");
            assert_eq!(same.patient_key, t.original.patient_key);
            assert!(!std::ptr::eq(same, t.original));
        }
        // multiclass mode leaves same_identity absent
        let t = sample_triplet(&split.train, IdentityMode::Multiclass, &mut rng).unwrap();
        assert!(t.same_identity.is_none());
    }

    #[test]
    fn all_class_pairs_observed_in_10000_draws() {
        let split = generate_synthetic(&FactorSpec { samples: 240, num_identities: 4, ..toy_spec() })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
        for _ in 0..10_000 {
            let t = sample_triplet(&split.train, IdentityMode::Multiclass, &mut rng).unwrap();
            assert_ne!(t.original.class_label, t.target.class_label);
            pairs.insert((t.original.class_label, t.target.class_label));
        }
        assert_eq!(pairs.len(), 2, "both (0,1) and (1,0) must occur");
    }

    #[test]
    fn single_class_pool_is_a_sampling_error() {
        let split = generate_synthetic(&toy_spec()).unwrap();
        let single: Vec<LabeledSample> = split
            .train
            .iter()
            .filter(|s| s.class_label == 0)
            .cloned()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            sample_triplet(&single, IdentityMode::Multiclass, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn siamese_excludes_singleton_identities_from_original_role() {
        let split = generate_synthetic(&toy_spec()).unwrap();
        // keep one sample of identity 0, all of the others
        let mut pool: Vec<LabeledSample> = Vec::new();
        let mut kept0 = false;
        for s in &split.train {
            if s.identity_label == 0 {
                if !kept0 {
                    pool.push(s.clone());
                    kept0 = true;
                }
            } else {
                pool.push(s.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let t = sample_triplet(&pool, IdentityMode::Siamese, &mut rng).unwrap();
            assert_ne!(t.original.identity_label, 0, "singleton identity used as original");
        }
    }

    #[test]
    fn directory_roundtrip_and_missing_file_error() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = toy_spec();
        write_synthetic_dataset(&spec, tmp.path()).unwrap();
        let opts = LoadOptions { image_size: spec.image_size, ..Default::default() };
        let loaded = load_directory_dataset(tmp.path(), &tmp.path().join("manifest.csv"), &opts).unwrap();
        let direct = generate_synthetic(&spec).unwrap();
        assert_eq!(loaded.train.len(), direct.train.len());
        // 8-bit quantized at generation time → lossless through PNG
        for (a, b) in loaded.train.iter().zip(direct.train.iter()) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.identity_label, b.identity_label);
        }

        // break one file
        std::fs::remove_file(tmp.path().join("images/00000.png")).unwrap();
        match load_directory_dataset(tmp.path(), &tmp.path().join("manifest.csv"), &opts) {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("00000.png")),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn write_twice_is_byte_identical() {
        let ta = tempfile::tempdir().unwrap();
        let tb = tempfile::tempdir().unwrap();
        let spec = toy_spec();
        write_synthetic_dataset(&spec, ta.path()).unwrap();
        write_synthetic_dataset(&spec, tb.path()).unwrap();
        for name in ["manifest.csv", "factors.json", "images/00000.png", "images/00100.png"] {
            let a = std::fs::read(ta.path().join(name)).unwrap();
            let b = std::fs::read(tb.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    /// 100-sample manifest at 24% class-1: every split lands within ±2pp.
    #[test]
    fn identity_stratified_split_preserves_ratio() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(tmp.path().join("images")).unwrap();
        let mut manifest = String::from("path,identity,class\n");
        let img = ArrayD::from_elem(IxDyn(&[1, 16, 16]), 0.5);
        let mut idx = 0;
        // 25 identities × 4 samples; 24 identities have one class-1 image
        for id in 0..25 {
            for k in 0..4 {
                let file = format!("images/{idx:03}.png");
                save_png_gray(&tmp.path().join(&file), &img).unwrap();
                let class = usize::from(id < 24 && k == 0);
                manifest.push_str(&format!("{file},p{id:02},{class}\n"));
                idx += 1;
            }
        }
        std::fs::write(tmp.path().join("manifest.csv"), &manifest).unwrap();
        let opts = LoadOptions { image_size: 16, ..Default::default() };
        let split = load_directory_dataset(tmp.path(), &tmp.path().join("manifest.csv"), &opts).unwrap();
        let global = 0.25;
        for (name, part) in [("train", &split.train), ("val", &split.validation), ("test", &split.test)] {
            assert!(!part.is_empty(), "{name} empty");
            let r = class_ratio(part);
            assert!((r - global).abs() <= 0.02 + 1e-9, "{name} ratio {r}");
        }
        // identity-disjointness
        let keys = |v: &[LabeledSample]| v.iter().map(|s| s.patient_key.clone()).collect::<BTreeSet<_>>();
        let (a, b, c) = (keys(&split.train), keys(&split.validation), keys(&split.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }

    #[test]
    fn siamese_singleton_identity_is_an_ingestion_error() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(tmp.path().join("images")).unwrap();
        let img = ArrayD::from_elem(IxDyn(&[1, 16, 16]), 0.5);
        let mut manifest = String::from("path,identity,class\n");
        for (i, (id, class)) in [("a", 0), ("a", 1), ("b", 0), ("c", 1)].iter().enumerate() {
            let file = format!("images/{i}.png");
            save_png_gray(&tmp.path().join(&file), &img).unwrap();
            manifest.push_str(&format!("{file},{id},{class}\n"));
        }
        std::fs::write(tmp.path().join("manifest.csv"), &manifest).unwrap();
        let opts = LoadOptions { image_size: 16, siamese: true, ..Default::default() };
        assert!(matches!(
            load_directory_dataset(tmp.path(), &tmp.path().join("manifest.csv"), &opts),
            Err(Error::Ingestion(_))
        ));
    }

    #[test]
    fn split_column_is_honored() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(tmp.path().join("images")).unwrap();
        let img = ArrayD::from_elem(IxDyn(&[1, 16, 16]), 0.5);
        let mut manifest = String::from("path,identity,class,split\n");
        for (i, split) in ["train", "train", "validation", "test"].iter().enumerate() {
            let file = format!("images/{i}.png");
            save_png_gray(&tmp.path().join(&file), &img).unwrap();
            manifest.push_str(&format!("{file},p{i},{},{split}\n", i % 2));
        }
        std::fs::write(tmp.path().join("manifest.csv"), &manifest).unwrap();
        let opts = LoadOptions { image_size: 16, ..Default::default() };
        let split = load_directory_dataset(tmp.path(), &tmp.path().join("manifest.csv"), &opts).unwrap();
        assert_eq!((split.train.len(), split.validation.len(), split.test.len()), (2, 1, 1));
    }
}

/// Re-exported for CLI use.
pub fn dataset_root_manifest(data_dir: &Path) -> PathBuf {
    data_dir.join("manifest.csv")
}
