//! Deterministic synthetic image generator with known factors of variation.
//!
//! Each identity gets a distinct geometric template (body, bar, dot — shape,
//! placement and intensities keyed to the identity id); class-k samples for
//! k ≥ 1 carry k bright elliptical markers at per-sample positions; nuisance
//! translation/rotation/brightness is applied per sample. Pixels are
//! quantized to 8-bit levels at generation time so the in-memory dataset and
//! its PNG round-trip are identical.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FactorSpec;

const BACKGROUND: f64 = 0.05;

/// Per-sample ground-truth nuisance record, persisted to factors.json.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SampleFactors {
    pub index: usize,
    pub file: String,
    pub identity: usize,
    pub class: usize,
    pub split: String,
    pub translate: [f64; 2],
    pub rotation_deg: f64,
    pub brightness: f64,
    pub lesions: Vec<LesionFactors>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LesionFactors {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Copy)]
enum BodyKind {
    Ellipse,
    Box,
    Diamond,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: BodyKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    intensity: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        match self.kind {
            BodyKind::Ellipse => u * u + v * v <= 1.0,
            BodyKind::Box => u.abs().max(v.abs()) <= 1.0,
            BodyKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

/// Stable per-(stream, index) seed derivation, splitmix64-style.
pub fn subseed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The identity's fixed template: a large body plus two smaller marks.
fn identity_template(spec: &FactorSpec, identity: usize) -> Vec<Shape> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(spec.seed, 0x1D, identity as u64));
    let size = spec.image_size as f64;
    let center = size / 2.0;
    // deterministic angular offset keeps identities spread out; jitter keeps
    // them irregular
    let base_angle = std::f64::consts::TAU * identity as f64 / spec.num_identities as f64;
    let theta = base_angle + rng.gen_range(-0.2..0.2);
    let body_kind = match identity % 3 {
        0 => BodyKind::Ellipse,
        1 => BodyKind::Box,
        _ => BodyKind::Diamond,
    };
    let body = Shape {
        kind: body_kind,
        cx: center + 0.10 * size * theta.cos(),
        cy: center + 0.10 * size * theta.sin(),
        rx: size * rng.gen_range(0.24..0.33),
        ry: size * rng.gen_range(0.24..0.33),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        intensity: 0.35 + 0.25 * rng.gen::<f64>(),
    };
    let bar = Shape {
        kind: BodyKind::Box,
        cx: body.cx + size * rng.gen_range(-0.06..0.06),
        cy: body.cy + size * rng.gen_range(-0.06..0.06),
        rx: size * rng.gen_range(0.28..0.40),
        ry: size * rng.gen_range(0.025..0.05),
        angle: theta + rng.gen_range(-0.3..0.3),
        intensity: 0.55 + 0.25 * rng.gen::<f64>(),
    };
    let dot_angle = theta + std::f64::consts::PI + rng.gen_range(-0.4..0.4);
    let dot = Shape {
        kind: BodyKind::Ellipse,
        cx: center + 0.30 * size * dot_angle.cos(),
        cy: center + 0.30 * size * dot_angle.sin(),
        rx: size * rng.gen_range(0.05..0.085),
        ry: size * rng.gen_range(0.05..0.085),
        angle: 0.0,
        intensity: 0.7 + 0.2 * rng.gen::<f64>(),
    };
    vec![body, bar, dot]
}

pub(super) struct RenderedSample {
    pub image: ArrayD<f64>,
    pub translate: [f64; 2],
    pub rotation_deg: f64,
    pub brightness: f64,
    pub lesions: Vec<LesionFactors>,
}

/// Renders sample `index` of the dataset described by `spec`.
pub(super) fn render_sample(
    spec: &FactorSpec,
    identity: usize,
    class: usize,
    index: usize,
) -> RenderedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(spec.seed, 0x5A, index as u64));
    let size = spec.image_size;
    let sizef = size as f64;
    let center = sizef / 2.0;

    let tx = rng.gen_range(-spec.nuisance.translation_px..=spec.nuisance.translation_px);
    let ty = rng.gen_range(-spec.nuisance.translation_px..=spec.nuisance.translation_px);
    let rot_deg = rng.gen_range(-spec.nuisance.rotation_deg..=spec.nuisance.rotation_deg);
    let brightness = 1.0 + spec.nuisance.brightness_jitter * rng.gen_range(-1.0..=1.0);

    let template = identity_template(spec, identity);
    let body = template[0];

    // class-k samples carry k markers placed near the body per sample
    let mut lesions = Vec::new();
    let mut shapes = template;
    for _ in 0..class {
        let r = sizef * rng.gen_range(0.0..0.20);
        let psi = rng.gen_range(0.0..std::f64::consts::TAU);
        let lesion = Shape {
            kind: BodyKind::Ellipse,
            cx: body.cx + r * psi.cos(),
            cy: body.cy + r * psi.sin(),
            rx: sizef * rng.gen_range(0.06..0.10),
            ry: sizef * rng.gen_range(0.045..0.075),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            intensity: 0.95,
        };
        lesions.push(LesionFactors {
            cx: lesion.cx,
            cy: lesion.cy,
            rx: lesion.rx,
            ry: lesion.ry,
            angle_deg: lesion.angle.to_degrees(),
        });
        shapes.push(lesion);
    }

    let rot = rot_deg.to_radians();
    let (s, c) = rot.sin_cos();
    let mut image = ArrayD::from_elem(IxDyn(&[1, size, size]), BACKGROUND);
    {
        let pixels = image.as_slice_mut().unwrap();
        // 2×2 supersampling with rigid scene transform
        const SUB: [(f64, f64); 4] = [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)];
        for py in 0..size {
            for px in 0..size {
                let mut value = BACKGROUND;
                for shape in &shapes {
                    let mut coverage = 0.0;
                    for (ox, oy) in SUB {
                        let x = px as f64 + ox;
                        let y = py as f64 + oy;
                        // undo translation then rotation about the center
                        let dx = x - tx - center;
                        let dy = y - ty - center;
                        let qx = c * dx + s * dy + center;
                        let qy = -s * dx + c * dy + center;
                        if shape.contains(qx, qy) {
                            coverage += 0.25;
                        }
                    }
                    value = value * (1.0 - coverage) + shape.intensity * coverage;
                }
                // quantize to 8-bit so PNG round-trips are exact
                let v = (value * brightness).clamp(0.0, 1.0);
                pixels[py * size + px] = (v * 255.0).round() / 255.0;
            }
        }
    }
    RenderedSample { image, translate: [tx, ty], rotation_deg: rot_deg, brightness, lesions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::NuisanceSpec;

    fn spec() -> FactorSpec {
        FactorSpec {
            num_identities: 4,
            num_classes: 2,
            image_size: 32,
            samples: 16,
            nuisance: NuisanceSpec::default(),
            seed: 9,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = spec();
        let a = render_sample(&s, 1, 1, 5);
        let b = render_sample(&s, 1, 1, 5);
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn pixels_are_quantized_and_bounded() {
        let s = spec();
        let r = render_sample(&s, 2, 1, 3);
        for v in r.image.iter() {
            assert!((0.0..=1.0).contains(v));
            let q = (v * 255.0).round() / 255.0;
            assert_eq!(*v, q);
        }
    }

    #[test]
    fn class_marker_changes_pixels() {
        let s = spec();
        // same sample index → same nuisance; only the marker differs
        let plain = render_sample(&s, 0, 0, 7);
        let marked = render_sample(&s, 0, 1, 7);
        let diff: f64 = plain
            .image
            .iter()
            .zip(marked.image.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1.0, "marker did not alter the image (diff {diff})");
        assert!(plain.lesions.is_empty());
        assert_eq!(marked.lesions.len(), 1);
    }

    #[test]
    fn identities_are_distinct() {
        let s = spec();
        for a in 0..s.num_identities {
            for b in (a + 1)..s.num_identities {
                let ia = render_sample(&s, a, 0, 0);
                let ib = render_sample(&s, b, 0, 0);
                let diff: f64 = ia
                    .image
                    .iter()
                    .zip(ib.image.iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(diff > 5.0, "identities {a} and {b} render too similarly");
            }
        }
    }
}
