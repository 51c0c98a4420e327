//! End-to-end checks of the command-line surface: exit codes, byte-level
//! determinism of gen-data, run manifests, and the anonymize/counterfactual/
//! evaluate round trip against a minimally trained checkpoint.

use std::path::Path;
use std::process::Command;

fn medanon_bin() -> &'static str {
    env!("CARGO_BIN_EXE_medanon")
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(medanon_bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn dir_checksum(dir: &Path) -> Vec<(String, u64)> {
    let mut entries = Vec::new();
    fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, u64)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, base, out);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                // manifest carries wall-clock duration; everything else must
                // be byte-identical
                let bytes = std::fs::read(&p).unwrap();
                let mut h = 0u64;
                for b in bytes {
                    h = h.wrapping_mul(1099511628211).wrapping_add(b as u64);
                }
                out.push((p.strip_prefix(base).unwrap().display().to_string(), h));
            }
        }
    }
    walk(dir, dir, &mut entries);
    entries.sort();
    entries
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    let out = run(&["definitely-not-a-command"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage") || stderr.contains("usage"));

    let out = run(&["gen-data", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_violation_exits_3_with_category() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--out",
        tmp.path().to_str().unwrap(),
        "--num-identities",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error[config]"), "got: {stderr}");
}

#[test]
fn gen_data_twice_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = run(&[
            "gen-data",
            "--out",
            dir.path().to_str().unwrap(),
            "--seed",
            "7",
            "--num-identities",
            "3",
            "--samples",
            "60",
            "--image-size",
            "16",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.path().join("run_manifest.json").exists());
        assert!(dir.path().join("factors.json").exists());
    }
    assert_eq!(dir_checksum(a.path()), dir_checksum(b.path()));
}

/// One tiny train → train-vae → anonymize → counterfactual → evaluate chain.
#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = run(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "--num-identities",
        "3",
        "--samples",
        "60",
        "--image-size",
        "16",
    ]);
    assert!(out.status.success());
    let input_stamp = dir_checksum(&data);

    let ckpt = tmp.path().join("ckpt");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--mode",
        "siamese",
        "--epochs",
        "1",
        "--batch-size",
        "4",
        "--image-size",
        "16",
        "--base-width",
        "8",
        "--disc-width",
        "8",
        "--d-id",
        "6",
        "--d-med",
        "4",
        "--d-rest",
        "10",
        "--stages",
        "2",
        "--vae-latent",
        "4",
        "--vae-hidden",
        "16",
        "--learning-rate",
        "1e-3",
        "--vae-epochs",
        "2",
        "--identity-overlap",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let best = ckpt.join("best");
    assert!(best.join("manifest.json").exists());
    assert!(ckpt.join("loss_log.jsonl").exists());
    assert!(ckpt.join("run_manifest.json").exists());

    let vae = tmp.path().join("vae");
    let out = run(&[
        "train-vae",
        "--checkpoint",
        best.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        vae.to_str().unwrap(),
        "--vae-epochs",
        "2",
        "--learning-rate",
        "1e-3",
        "--identity-overlap",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let vae_best = vae.join("best");

    // anonymize a single PNG and a directory, with determinism across reruns
    let anon1 = tmp.path().join("anon1");
    let input1 = data.join("images/00000.png");
    for _ in 0..2 {
        let out = run(&[
            "anonymize",
            "--checkpoint",
            best.to_str().unwrap(),
            "--vae",
            vae_best.to_str().unwrap(),
            "--input",
            input1.to_str().unwrap(),
            "--out",
            anon1.to_str().unwrap(),
            "--seed",
            "5",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(anon1.join("00000_anon.png").exists());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(anon1.join("00000_anon.json")).unwrap()).unwrap();
    assert_eq!(sidecar["method"], "vae");
    assert_eq!(sidecar["seed"], 5);
    assert!(sidecar["siamese_distance_to_original"].as_f64().unwrap() >= 0.0);

    // averaging method over the training pool
    let anon2 = tmp.path().join("anon2");
    let out = run(&[
        "anonymize",
        "--checkpoint",
        best.to_str().unwrap(),
        "--input",
        input1.to_str().unwrap(),
        "--out",
        anon2.to_str().unwrap(),
        "--method",
        "avg",
        "--k",
        "2",
        "--data",
        data.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cf = tmp.path().join("cf.png");
    let out = run(&[
        "counterfactual",
        "--checkpoint",
        best.to_str().unwrap(),
        "--input",
        input1.to_str().unwrap(),
        "--target",
        data.join("images/00001.png").to_str().unwrap(),
        "--out",
        cf.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cf.exists());

    let report = tmp.path().join("report/report.json");
    let out = run(&[
        "evaluate",
        "--checkpoint",
        best.to_str().unwrap(),
        "--vae",
        vae_best.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--experiments",
        "recon,med,id,anon",
        "--out",
        report.to_str().unwrap(),
        "--max-pairs",
        "4",
        "--identity-overlap",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report.exists());
    assert!(report.with_extension("txt").exists());
    assert!(report.parent().unwrap().join("records.jsonl").exists());
    assert!(report.parent().unwrap().join("contact_sheet.png").exists());
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["rows"].as_array().unwrap().len(), 4);

    // input directories must not be mutated by any subcommand
    assert_eq!(input_stamp, dir_checksum(&data));
}

/// `train --preset iris` resolves the published iris weights.
#[test]
fn preset_iris_loads_published_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "--num-identities",
        "3",
        "--samples",
        "48",
        "--image-size",
        "16",
    ]);
    let ckpt = tmp.path().join("ckpt");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--preset",
        "iris",
        "--epochs",
        "0",
        "--image-size",
        "16",
        "--base-width",
        "8",
        "--disc-width",
        "8",
        "--stages",
        "2",
        "--identity-overlap",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(ckpt.join("run_manifest.json")).unwrap(),
    )
    .unwrap();
    let w = &manifest["config"]["train"]["weights"];
    assert_eq!(w["lambda_med"], 1.0);
    assert_eq!(w["lambda_id"], 1.0);
    assert_eq!(w["lambda_r"], 0.1);
    assert_eq!(w["lambda_d"], 5.0);
    assert_eq!(manifest["config"]["train"]["mode"], "multiclass");
}
