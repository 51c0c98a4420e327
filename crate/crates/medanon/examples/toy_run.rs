// temporary calibration driver for the toy acceptance configuration
use medanon::datasets::{generate_synthetic, FactorSpec};
use medanon::evaluation::{run_report, EvalConfig, Experiment};
use medanon::losses::LossWeights;
use medanon::metrics::MetricConfig;
use medanon::networks::checkpoint::load_bundle;
use medanon::networks::{image_to_element, NetworkConfig};
use medanon::training::{train_disentangler, vae::train_identity_vae, LossFlags, TrainConfig};
use medanon::IdentityMode;
use std::time::Instant;

fn main() {
    // args: epochs seed width lr l_med l_id l_r l_d adv(0|1) [batch]
    let a: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| a.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(d);
    let epochs = get(1, 30.0) as usize;
    let seed = get(2, 1.0) as u64;
    let width = get(3, 8.0) as usize;
    let lr = get(4, 1e-3);
    let weights = LossWeights {
        lambda_med: get(5, 5.0),
        lambda_id: get(6, 5.0),
        lambda_r: get(7, 1.0),
        lambda_d: get(8, 5.0),
        ..Default::default()
    };
    let adversarial = get(9, 1.0) > 0.5;
    let batch = get(10, 16.0) as usize;
    let dropout = get(11, 0.3);
    let d_v = get(12, 8.0) as usize;

    let data = generate_synthetic(&FactorSpec {
        num_identities: 8,
        num_classes: 2,
        image_size: 32,
        samples: 1000,
        seed: 99,
        ..Default::default()
    })
    .unwrap();

    let net = NetworkConfig {
        image_size: 32,
        base_width: width,
        disc_width: 8,
        d_id: 32,
        d_med: 16,
        d_rest: 80,
        stages: 3,
        num_identities: 8,
        num_classes: 2,
        identity_mode: IdentityMode::Siamese,
        init_seed: seed,
        dropout,
        vae_latent: d_v,
        ..Default::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        mode: IdentityMode::Siamese,
        epochs,
        batch_size: batch,
        learning_rate: lr,
        seed,
        validation_every: 10,
        checkpoint_dir: tmp.path().join("ckpt"),
        weights,
        loss_flags: LossFlags { adversarial, augment: adversarial, ..Default::default() },
        vae_epochs: 300,
        ..Default::default()
    };

    let t0 = Instant::now();
    let ckpt = train_disentangler::<f32>(&data, &net, &cfg).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let (bundle, _) = load_bundle::<f32>(&ckpt.dir).unwrap();

    // embedding separation diagnostics on the test split (identity and class)
    let zs: Vec<(usize, usize, Vec<f64>, Vec<f64>)> = data
        .test
        .iter()
        .map(|s| {
            let t = bundle.encode(&image_to_element::<f32>(&s.image)).unwrap();
            (
                s.identity_label,
                s.class_label,
                t.z_id.iter().map(|v| *v as f64).collect(),
                t.z_med.iter().map(|v| *v as f64).collect(),
            )
        })
        .collect();
    let (mut intra, mut inter, mut ni, mut ne) = (0.0, 0.0, 0usize, 0usize);
    let (mut m_intra, mut m_inter, mut mi, mut me) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..zs.len() {
        for j in (i + 1)..zs.len() {
            let d = medanon::networks::siamese_distance(&zs[i].2, &zs[j].2).unwrap();
            if zs[i].0 == zs[j].0 {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                ne += 1;
            }
            let dm = medanon::networks::siamese_distance(&zs[i].3, &zs[j].3).unwrap();
            if zs[i].1 == zs[j].1 {
                m_intra += dm;
                mi += 1;
            } else {
                m_inter += dm;
                me += 1;
            }
        }
    }
    eprintln!(
        "dist: id intra {:.4} inter {:.4} | med same-class {:.4} cross-class {:.4}",
        intra / ni as f64,
        inter / ne as f64,
        m_intra / mi as f64,
        m_inter / me as f64
    );

    let t1 = Instant::now();
    let vae_ckpt = train_identity_vae(&bundle, &data, &net, &cfg, true, &tmp.path().join("vae")).unwrap();
    let vae_secs = t1.elapsed().as_secs_f64();
    let (vae, _) = medanon::networks::checkpoint::load_vae::<f32>(&vae_ckpt.dir).unwrap();

    let eval_cfg = EvalConfig {
        seed: 7,
        threshold_t: 0.05,
        metrics: MetricConfig::default(),
        mode: IdentityMode::Siamese,
        max_pairs: Some(80),
    };
    let (report, _) = run_report(&bundle, Some(&vae), &data.test, &data.train, &Experiment::ALL, &eval_cfg).unwrap();
    println!("{}", medanon::evaluation::format_text_table(&report));

    // anonymization diagnostics: latent-space vs re-encoded distances to the gallery
    let gallery: Vec<Vec<f64>> = data
        .train
        .iter()
        .map(|s| {
            bundle
                .encode(&image_to_element::<f32>(&s.image))
                .unwrap()
                .z_id
                .iter()
                .map(|v| *v as f64)
                .collect()
        })
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    use rand::SeedableRng as _;
    let mut direct_min = Vec::new();
    let mut reenc_min = Vec::new();
    for s in data.test.iter().take(40) {
        let r = medanon::anonymization::anonymize(&bundle, &vae, &image_to_element::<f32>(&s.image), &mut rng).unwrap();
        let z_direct: Vec<f64> = r.synthetic_z_id.iter().map(|v| *v as f64).collect();
        let z_re: Vec<f64> = bundle.encode(&r.image).unwrap().z_id.iter().map(|v| *v as f64).collect();
        let dmin = |z: &Vec<f64>| {
            gallery
                .iter()
                .map(|g| medanon::networks::siamese_distance(z, g).unwrap())
                .fold(f64::INFINITY, f64::min)
        };
        direct_min.push(dmin(&z_direct));
        reenc_min.push(dmin(&z_re));
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let frac_below = |v: &Vec<f64>| v.iter().filter(|d| **d < 0.05).count() as f64 / v.len() as f64;
    eprintln!(
        "anon diag: latent min-dist mean {:.4} (<t {:.2}), re-encoded min-dist mean {:.4} (<t {:.2})",
        mean(&direct_min),
        frac_below(&direct_min),
        mean(&reenc_min),
        frac_below(&reenc_min)
    );
    medanon::evaluation::write_contact_sheet(
        &bundle,
        Some(&vae as &dyn medanon::evaluation::SyntheticIdentitySampler),
        &data.test,
        std::path::Path::new("/tmp/sheet.png"),
        7,
        6,
    )
    .unwrap();
    eprintln!(
        "cfg: epochs={epochs} seed={seed} w={width} lr={lr} λ=({},{},{},{}) adv={adversarial} batch={batch} | train {train_secs:.0}s vae {vae_secs:.0}s",
        cfg.weights.lambda_med, cfg.weights.lambda_id, cfg.weights.lambda_r, cfg.weights.lambda_d
    );
}
