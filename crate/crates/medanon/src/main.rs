//! Command-line entry point: dataset generation, training, anonymization,
//! counterfactual generation, evaluation and ablations.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 configuration
//! violation. Every run writes a `run_manifest.json` into its output
//! directory with the resolved configuration snapshot.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use medanon::anonymization::{self, AnonymizationMethod};
use medanon::config::{self, Overrides, Preset};
use medanon::datasets::{self, FactorSpec, LoadOptions, NuisanceSpec};
use medanon::error::{Error, Result};
use medanon::evaluation::{self, ablation, EvalConfig, Experiment};
use medanon::metrics::MetricConfig;
use medanon::networks::checkpoint::{load_bundle, load_vae, read_manifest};
use medanon::networks::{image_to_element, image_to_f64, siamese_distance, NetworkConfig};
use medanon::nn::{Dtype, Element};
use medanon::training::{self, vae::train_identity_vae, TrainConfig};
use medanon::IdentityMode;

#[derive(Parser)]
#[command(
    name = "medanon",
    about = "Identity/medical feature disentanglement and privacy-preserving image anonymization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic factor-labeled dataset (images + manifest.csv + factors.json).
    GenData(GenDataArgs),
    /// Train the disentanglement network on a directory dataset.
    Train(TrainArgs),
    /// Train the identity VAE against a trained disentangler checkpoint.
    TrainVae(TrainVaeArgs),
    /// Anonymize images by replacing their identity latent.
    Anonymize(AnonymizeArgs),
    /// Generate a counterfactual by replacing the medical latent.
    Counterfactual(CounterfactualArgs),
    /// Evaluate a checkpoint: realism, identity and disease recognition.
    Evaluate(EvaluateArgs),
    /// Run an ablation study (realism-loss variants or dataset sizes).
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    num_identities: usize,
    #[arg(long, default_value_t = 2)]
    num_classes: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    translation: f64,
    #[arg(long, default_value_t = 8.0)]
    rotation: f64,
    #[arg(long, default_value_t = 0.1)]
    brightness_jitter: f64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
}

#[derive(Args, Clone)]
struct SharedConfigArgs {
    /// Named preset: chest | face | iris | toy.
    #[arg(long)]
    preset: Option<String>,
    /// TOML config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    validation_every: Option<usize>,
    #[arg(long)]
    freeze_classifiers: Option<bool>,
    /// Force single-threaded batch processing.
    #[arg(long, default_value_t = false)]
    sequential: bool,
    #[arg(long)]
    vae_epochs: Option<usize>,
    #[arg(long)]
    vae_batch_size: Option<usize>,
    #[arg(long)]
    lambda_med: Option<f64>,
    #[arg(long)]
    lambda_id: Option<f64>,
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    threshold_t: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    d_id: Option<usize>,
    #[arg(long)]
    d_med: Option<usize>,
    #[arg(long)]
    d_rest: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    disc_width: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    vae_latent: Option<usize>,
    #[arg(long)]
    vae_hidden: Option<usize>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    flip_probability: Option<f64>,
    #[arg(long)]
    crop_probability: Option<f64>,
    #[arg(long)]
    crop_fraction: Option<f64>,
    #[arg(long)]
    brightness_probability: Option<f64>,
    #[arg(long)]
    brightness_delta: Option<f64>,
}

impl SharedConfigArgs {
    fn resolve(&self) -> Result<(NetworkConfig, TrainConfig)> {
        let preset = self.preset.as_deref().map(str::parse::<Preset>).transpose()?;
        let file = self
            .config
            .as_deref()
            .map(config::load_file_config)
            .transpose()?;
        let mode = self.mode.as_deref().map(str::parse::<IdentityMode>).transpose()?;
        let overrides = Overrides {
            mode,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            validation_every: self.validation_every,
            freeze_classifiers: self.freeze_classifiers,
            sequential: self.sequential.then_some(true),
            vae_epochs: self.vae_epochs,
            vae_batch_size: self.vae_batch_size,
            lambda_med: self.lambda_med,
            lambda_id: self.lambda_id,
            lambda_r: self.lambda_r,
            lambda_d: self.lambda_d,
            alpha: self.alpha,
            margin: self.margin,
            threshold_t: self.threshold_t,
            image_size: self.image_size,
            channels: self.channels,
            d_id: self.d_id,
            d_med: self.d_med,
            d_rest: self.d_rest,
            stages: self.stages,
            base_width: self.base_width,
            disc_width: self.disc_width,
            dropout: self.dropout,
            vae_latent: self.vae_latent,
            vae_hidden: self.vae_hidden,
            init_seed: self.init_seed,
            flip_probability: self.flip_probability,
            crop_probability: self.crop_probability,
            crop_fraction: self.crop_fraction,
            brightness_probability: self.brightness_probability,
            brightness_delta: self.brightness_delta,
        };
        config::resolve(preset, file.as_ref(), &overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding manifest.csv and images/.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    /// Working precision: f32 | f64.
    #[arg(long, default_value = "f32")]
    dtype: String,
    /// Allow one identity to appear in several splits when the manifest has
    /// no split column.
    #[arg(long, default_value_t = false)]
    identity_overlap: bool,
    #[command(flatten)]
    shared: SharedConfigArgs,
}

#[derive(Args)]
struct TrainVaeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Disable the privacy regularizer (entropy/hinge terms): plain VAE.
    #[arg(long, default_value_t = false)]
    no_privacy_regularizer: bool,
    #[arg(long, default_value_t = false)]
    identity_overlap: bool,
    #[command(flatten)]
    shared: SharedConfigArgs,
}

#[derive(Args)]
struct AnonymizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Identity-VAE checkpoint (required for --method vae).
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Input PNG file or a directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// vae | avg
    #[arg(long, default_value = "vae")]
    method: String,
    /// Donor identity count for --method avg.
    #[arg(long)]
    k: Option<usize>,
    /// Dataset directory providing donor identities for --method avg.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CounterfactualArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated: recon,med,id,anon.
    #[arg(long, default_value = "recon,med,id")]
    experiments: String,
    /// Report JSON path; the text table, records and contact sheet are
    /// written alongside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train fresh classifier heads on held-out data instead of reusing the
    /// training-time heads.
    #[arg(long, default_value_t = false)]
    external_evaluator: bool,
    #[arg(long, default_value_t = false)]
    identity_overlap: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// realism | datasize
    which: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "f32")]
    dtype: String,
    /// Realism variants (comma-separated slugs); defaults to all six.
    #[arg(long)]
    variants: Option<String>,
    /// Training-set sizes for the datasize sweep (comma-separated).
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long, default_value_t = false)]
    identity_overlap: bool,
    #[command(flatten)]
    shared: SharedConfigArgs,
}

// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    code_version: &'static str,
    inputs: Vec<String>,
    outputs: Vec<String>,
    duration_seconds: f64,
}

fn write_run_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join("run_manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(manifest).expect("serializable"))?;
    std::fs::rename(tmp, dir.join("run_manifest.json"))?;
    Ok(())
}

fn load_dataset(
    dir: &Path,
    net: &NetworkConfig,
    seed: u64,
    siamese: bool,
    identity_overlap: bool,
) -> Result<datasets::DatasetSplit> {
    let manifest = dir.join("manifest.csv");
    let opts = LoadOptions {
        image_size: net.image_size,
        channels: net.channels,
        seed,
        identity_disjoint_splits: !identity_overlap,
        siamese,
        ..Default::default()
    };
    datasets::load_directory_dataset(dir, &manifest, &opts)
}

fn parse_dtype(s: &str) -> Result<Dtype> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(Error::config(format!("unknown dtype '{other}' (expected f32|f64)"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let result = match cli.command {
        Command::GenData(args) => run_gen_data(args, started),
        Command::Train(args) => run_train(args, started),
        Command::TrainVae(args) => run_train_vae(args, started),
        Command::Anonymize(args) => run_anonymize(args, started),
        Command::Counterfactual(args) => run_counterfactual(args, started),
        Command::Evaluate(args) => run_evaluate(args, started),
        Command::Ablate(args) => run_ablate(args, started),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            match e {
                Error::Config(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run_gen_data(args: GenDataArgs, started: Instant) -> Result<()> {
    let spec = FactorSpec {
        num_identities: args.num_identities,
        num_classes: args.num_classes,
        image_size: args.image_size,
        samples: args.samples,
        nuisance: NuisanceSpec {
            translation_px: args.translation,
            rotation_deg: args.rotation,
            brightness_jitter: args.brightness_jitter,
        },
        seed: args.seed,
        train_fraction: args.train_fraction,
        val_fraction: args.val_fraction,
    };
    datasets::write_synthetic_dataset(&spec, &args.out)?;
    eprintln!(
        "wrote {} samples to {}",
        spec.samples,
        args.out.display()
    );
    write_run_manifest(
        &args.out,
        &RunManifest {
            command: "gen-data".into(),
            config: serde_json::to_value(&spec).unwrap(),
            seed: args.seed,
            code_version: env!("CARGO_PKG_VERSION"),
            inputs: vec![],
            outputs: vec![args.out.display().to_string()],
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn run_train(args: TrainArgs, started: Instant) -> Result<()> {
    let (mut net, mut train) = args.shared.resolve()?;
    train.checkpoint_dir = args.out.clone();
    let siamese = train.mode == IdentityMode::Siamese;
    let data = load_dataset(&args.data, &net, train.seed, siamese, args.identity_overlap)?;
    net.num_classes = net.num_classes.max(data.num_classes);
    net.num_identities = data.num_identities.max(3);
    let ckpt = match parse_dtype(&args.dtype)? {
        Dtype::F32 => training::train_disentangler::<f32>(&data, &net, &train)?,
        Dtype::F64 => training::train_disentangler::<f64>(&data, &net, &train)?,
    };
    eprintln!(
        "best checkpoint at {} (epoch {}, metric {:.4})",
        ckpt.dir.display(),
        ckpt.meta.epoch,
        ckpt.meta.metric
    );
    write_run_manifest(
        &args.out,
        &RunManifest {
            command: "train".into(),
            config: serde_json::json!({ "network": net, "train": train }),
            seed: train.seed,
            code_version: env!("CARGO_PKG_VERSION"),
            inputs: vec![args.data.display().to_string()],
            outputs: vec![ckpt.dir.display().to_string()],
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn run_train_vae(args: TrainVaeArgs, started: Instant) -> Result<()> {
    let meta = read_manifest(&args.checkpoint)?;
    let (_, mut train) = args.shared.resolve()?;
    let net = meta.network_config.clone();
    let siamese = net.identity_mode == IdentityMode::Siamese;
    train.mode = net.identity_mode;
    let data = load_dataset(&args.data, &net, train.seed, siamese, args.identity_overlap)?;
    let regularizer = !args.no_privacy_regularizer;
    let ckpt = match meta.dtype {
        Dtype::F32 => {
            let (bundle, _) = load_bundle::<f32>(&args.checkpoint)?;
            train_identity_vae(&bundle, &data, &net, &train, regularizer, &args.out)?
        }
        Dtype::F64 => {
            let (bundle, _) = load_bundle::<f64>(&args.checkpoint)?;
            train_identity_vae(&bundle, &data, &net, &train, regularizer, &args.out)?
        }
    };
    eprintln!(
        "best VAE checkpoint at {} (epoch {}, val loss {:.4})",
        ckpt.dir.display(),
        ckpt.meta.epoch,
        ckpt.meta.metric
    );
    write_run_manifest(
        &args.out,
        &RunManifest {
            command: "train-vae".into(),
            config: serde_json::json!({
                "network": net,
                "train": train,
                "privacy_regularizer": regularizer,
            }),
            seed: train.seed,
            code_version: env!("CARGO_PKG_VERSION"),
            inputs: vec![args.checkpoint.display().to_string(), args.data.display().to_string()],
            outputs: vec![ckpt.dir.display().to_string()],
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn list_input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::ingestion(format!("no PNG files in {}", input.display())));
        }
        Ok(files)
    } else if input.exists() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::ingestion(format!("missing input {}", input.display())))
    }
}

fn load_input_image(path: &Path, net: &NetworkConfig) -> Result<ndarray::ArrayD<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::ingestion(format!("cannot open {}: {e}", path.display())))?
        .resize_exact(
            net.image_size as u32,
            net.image_size as u32,
            image::imageops::FilterType::Triangle,
        );
    let g = img.to_luma8();
    let data: Vec<f64> = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Ok(ndarray::ArrayD::from_shape_vec(
        ndarray::IxDyn(&[1, net.image_size, net.image_size]),
        data,
    )
    .unwrap())
}

enum AnonMethod<E: Element> {
    Vae(medanon::networks::IdentityVae<E>),
    Avg(Vec<datasets::LabeledSample>, Option<usize>),
}

fn run_anonymize_generic<E: Element>(args: &AnonymizeArgs, started: Instant) -> Result<()> {
    let (bundle, meta) = load_bundle::<E>(&args.checkpoint)?;
    let net = &meta.network_config;
    let files = list_input_images(&args.input)?;
    std::fs::create_dir_all(&args.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut outputs = Vec::new();

    let method = match args.method.as_str() {
        "vae" => {
            let vae_dir = args
                .vae
                .as_ref()
                .ok_or_else(|| Error::config("--method vae requires --vae DIR"))?;
            AnonMethod::Vae(load_vae::<E>(vae_dir)?.0)
        }
        "avg" => {
            let data_dir = args
                .data
                .as_ref()
                .ok_or_else(|| Error::config("--method avg requires --data DIR (donor pool)"))?;
            let data = load_dataset(data_dir, net, args.seed, false, true)?;
            AnonMethod::Avg(data.train, args.k)
        }
        other => return Err(Error::config(format!("unknown method '{other}' (vae|avg)"))),
    };

    for file in &files {
        let image_f64 = load_input_image(file, net)?;
        let image = image_to_element::<E>(&image_f64);
        let result = match &method {
            AnonMethod::Vae(vae) => anonymization::anonymize(&bundle, vae, &image, &mut rng)?,
            AnonMethod::Avg(pool, k) => {
                // the original's identity is unknown for arbitrary inputs;
                // donors are drawn over all training identities
                let donors = anonymization::pick_donors(pool, usize::MAX, *k, &mut rng)?;
                let donor_imgs: Vec<_> = donors
                    .iter()
                    .map(|s| image_to_element::<E>(&s.image))
                    .collect();
                anonymization::average_identities(&bundle, &image, &donor_imgs)?
            }
        };
        let stem = file.file_stem().unwrap_or_default().to_string_lossy();
        let out_png = args.out.join(format!("{stem}_anon.png"));
        datasets::save_png_gray(&out_png, &image_to_f64(&result.image))?;
        let z_src: Vec<f64> = result.source_latents.z_id.iter().map(|v| v.as_f64()).collect();
        let z_new: Vec<f64> = result.synthetic_z_id.iter().map(|v| v.as_f64()).collect();
        let sidecar = serde_json::json!({
            "method": match result.method {
                AnonymizationMethod::Vae => "vae".to_string(),
                AnonymizationMethod::VaeNoEntropy => "vae_no_entropy".to_string(),
                AnonymizationMethod::AverageK(k) => format!("avg_{k}"),
            },
            "seed": args.seed,
            "siamese_distance_to_original": siamese_distance(&z_src, &z_new)?,
        });
        std::fs::write(
            args.out.join(format!("{stem}_anon.json")),
            serde_json::to_string_pretty(&sidecar).unwrap(),
        )?;
        outputs.push(out_png.display().to_string());
    }
    eprintln!("anonymized {} image(s) into {}", files.len(), args.out.display());
    write_run_manifest(
        &args.out,
        &RunManifest {
            command: "anonymize".into(),
            config: serde_json::json!({ "method": args.method, "k": args.k }),
            seed: args.seed,
            code_version: env!("CARGO_PKG_VERSION"),
            inputs: files.iter().map(|f| f.display().to_string()).collect(),
            outputs,
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn run_anonymize(args: AnonymizeArgs, started: Instant) -> Result<()> {
    match read_manifest(&args.checkpoint)?.dtype {
        Dtype::F32 => run_anonymize_generic::<f32>(&args, started),
        Dtype::F64 => run_anonymize_generic::<f64>(&args, started),
    }
}

fn run_counterfactual_generic<E: Element>(args: &CounterfactualArgs, started: Instant) -> Result<()> {
    let (bundle, meta) = load_bundle::<E>(&args.checkpoint)?;
    let original = image_to_element::<E>(&load_input_image(&args.input, &meta.network_config)?);
    let target = image_to_element::<E>(&load_input_image(&args.target, &meta.network_config)?);
    let out_img = anonymization::counterfactual(&bundle, &original, &target)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    datasets::save_png_gray(&args.out, &image_to_f64(&out_img))?;
    eprintln!("wrote counterfactual to {}", args.out.display());
    let dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_run_manifest(
        &dir,
        &RunManifest {
            command: "counterfactual".into(),
            config: serde_json::Value::Null,
            seed: 0,
            code_version: env!("CARGO_PKG_VERSION"),
            inputs: vec![args.input.display().to_string(), args.target.display().to_string()],
            outputs: vec![args.out.display().to_string()],
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn run_counterfactual(args: CounterfactualArgs, started: Instant) -> Result<()> {
    match read_manifest(&args.checkpoint)?.dtype {
        Dtype::F32 => run_counterfactual_generic::<f32>(&args, started),
        Dtype::F64 => run_counterfactual_generic::<f64>(&args, started),
    }
}

fn run_evaluate_generic<E: Element>(args: &EvaluateArgs, started: Instant) -> Result<()> {
    let (bundle, meta) = load_bundle::<E>(&args.checkpoint)?;
    let net = &meta.network_config;
    let siamese = net.identity_mode == IdentityMode::Siamese;
    let data = load_dataset(&args.data, net, args.seed, siamese, args.identity_overlap)?;
    let experiments: Vec<Experiment> = args
        .experiments
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    let vae = args.vae.as_deref().map(load_vae::<E>).transpose()?.map(|(v, _)| v);
    if experiments.contains(&Experiment::Anonymization) && vae.is_none() {
        return Err(Error::config("the anon experiment requires --vae DIR"));
    }
    let cfg = EvalConfig {
        seed: args.seed,
        threshold_t: 0.05,
        metrics: MetricConfig::default(),
        mode: net.identity_mode,
        max_pairs: args.max_pairs,
    };
    let eval_set = if data.test.is_empty() { &data.train } else { &data.test };
    let vae_dyn = vae
        .as_ref()
        .map(|v| v as &dyn evaluation::SyntheticIdentitySampler);

    let external;
    let model: &dyn evaluation::EvalModel = if args.external_evaluator {
        let held_out = if data.validation.is_empty() { &data.train } else { &data.validation };
        external = evaluation::external::train_external_evaluator(&bundle, held_out, 200, args.seed)?;
        &external
    } else {
        &bundle
    };

    let (report, records) = evaluation::run_report(model, vae_dyn, eval_set, &data.train, &experiments, &cfg)?;

    let out_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&report).unwrap())?;
    let table = evaluation::format_text_table(&report);
    let table_path = args.out.with_extension("txt");
    std::fs::write(&table_path, &table)?;
    let records_path = out_dir.join("records.jsonl");
    evaluation::write_records_jsonl(&records_path, &records)?;
    let sheet_path = out_dir.join("contact_sheet.png");
    evaluation::write_contact_sheet(model, vae_dyn, eval_set, &sheet_path, args.seed, 8)?;
    print!("{table}");
    write_run_manifest(
        &out_dir,
        &RunManifest {
            command: "evaluate".into(),
            config: serde_json::json!({
                "experiments": experiments,
                "threshold_t": cfg.threshold_t,
                "external_evaluator": args.external_evaluator,
            }),
            seed: args.seed,
            code_version: env!("CARGO_PKG_VERSION"),
            inputs: vec![args.checkpoint.display().to_string(), args.data.display().to_string()],
            outputs: vec![
                args.out.display().to_string(),
                table_path.display().to_string(),
                records_path.display().to_string(),
                sheet_path.display().to_string(),
            ],
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn run_evaluate(args: EvaluateArgs, started: Instant) -> Result<()> {
    match read_manifest(&args.checkpoint)?.dtype {
        Dtype::F32 => run_evaluate_generic::<f32>(&args, started),
        Dtype::F64 => run_evaluate_generic::<f64>(&args, started),
    }
}

fn run_ablate_generic<E: Element>(args: &AblateArgs, started: Instant) -> Result<()> {
    let (mut net, mut train) = args.shared.resolve()?;
    train.checkpoint_dir = args.out.clone();
    let siamese = train.mode == IdentityMode::Siamese;
    let data = load_dataset(&args.data, &net, train.seed, siamese, args.identity_overlap)?;
    net.num_classes = net.num_classes.max(data.num_classes);
    net.num_identities = data.num_identities.max(3);
    let eval_cfg = EvalConfig {
        seed: train.seed,
        threshold_t: train.weights.threshold_t,
        metrics: train.metrics.clone(),
        mode: train.mode,
        max_pairs: Some(64),
    };
    std::fs::create_dir_all(&args.out)?;
    let config_snapshot = serde_json::json!({ "network": net, "train": train, "which": args.which });
    match args.which.as_str() {
        "realism" => {
            let variants: Vec<ablation::RealismVariant> = match &args.variants {
                None => ablation::RealismVariant::ALL.to_vec(),
                Some(list) => list
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?,
            };
            let rows = ablation::run_ablation_realism::<E>(&data, &variants, &net, &train, &eval_cfg, &args.out)?;
            std::fs::write(
                args.out.join("ablation_realism.json"),
                serde_json::to_string_pretty(&rows).unwrap(),
            )?;
            let table = ablation::format_realism_table(&rows);
            std::fs::write(args.out.join("ablation_realism.txt"), &table)?;
            print!("{table}");
        }
        "datasize" => {
            let sizes: Vec<usize> = args
                .sizes
                .as_ref()
                .ok_or_else(|| Error::config("datasize ablation requires --sizes N,N,..."))?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad size '{s}'")))
                })
                .collect::<Result<_>>()?;
            let rows = ablation::run_ablation_datasize::<E>(&data, &sizes, &net, &train, &eval_cfg, &args.out)?;
            std::fs::write(
                args.out.join("ablation_datasize.json"),
                serde_json::to_string_pretty(&rows).unwrap(),
            )?;
            let table = ablation::format_datasize_table(&rows);
            std::fs::write(args.out.join("ablation_datasize.txt"), &table)?;
            print!("{table}");
        }
        other => return Err(Error::config(format!("unknown ablation '{other}' (realism|datasize)"))),
    }
    write_run_manifest(
        &args.out,
        &RunManifest {
            command: format!("ablate {}", args.which),
            config: config_snapshot,
            seed: train.seed,
            code_version: env!("CARGO_PKG_VERSION"),
            inputs: vec![args.data.display().to_string()],
            outputs: vec![args.out.display().to_string()],
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn run_ablate(args: AblateArgs, started: Instant) -> Result<()> {
    match parse_dtype(&args.dtype)? {
        Dtype::F32 => run_ablate_generic::<f32>(&args, started),
        Dtype::F64 => run_ablate_generic::<f64>(&args, started),
    }
}
