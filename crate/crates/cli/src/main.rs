use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use inout_core::classifier::{self, Classifier, TrainConfig};
use inout_core::diffusion::DenoisingModel;
use inout_core::eval::{self, MetricsTriple, ReportFormat};
use inout_core::experiment::{run_experiment, DatasetSource, ExperimentConfig, Pipeline};
use inout_core::hashing::derive_seed;
use inout_core::lora::{self, LoraAdapter, MergeWeight};
use inout_core::manifest::{file_stem_for, write_fragment, DatasetManifest, ImageSample, Label, Split};
use inout_core::mixer::{self, AdapterGenerator, DiffusionSource, Policy, Scenario};
use inout_core::region::RegionAugmenter;
use inout_review::{AdapterSource, AppState, Store};

/// Built-in configuration used when `--config` is not given.
const DEFAULT_CONFIG: &str = include_str!("../../../configs/toy_few_shot.toml");

const ENV_OPERATOR_TOKEN: &str = "INOUT_OPERATOR_TOKEN";

#[derive(Parser)]
#[command(name = "inout", version, about = "Defect augmentation: fine-tuned diffusion samples plus region noise")]
struct Cli {
    /// Repeat for more log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults to the built-in toy few-shot setup.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the configured dataset and write its manifest.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Read image/mask folders from this root instead of the configured source.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a low-rank adapter for one seed.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f32>,
        #[arg(long)]
        rank: Option<usize>,
        /// Where to copy the adapter archive.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample images from the base model merged with an adapter.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Defaults to the first configured augmentation prompt.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        count: usize,
        /// Merge weight in [0, 1]; defaults to the config's.
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Adapter archive to merge; without one the adapter for `--seed` is trained.
        #[arg(long, conflicts_with = "no_adapter")]
        adapter: Option<PathBuf>,
        /// Sample the base model alone.
        #[arg(long)]
        no_adapter: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Make out-of-distribution positives from train negatives.
    AugmentRegion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build one augmented training set.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_enum::<Policy>)]
        policy: Option<Policy>,
        #[arg(long)]
        n_aug: Option<usize>,
        #[arg(long, value_parser = parse_enum::<Scenario>)]
        scenario: Option<Scenario>,
        /// Original positives kept.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the defect classifier on a manifest's train split.
    Train {
        #[command(flatten)]
        common: Common,
        /// A manifest written by `build-dataset` or `ingest`; defaults to the configured dataset.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a manifest's test split and report AP, precision and recall.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Operating threshold; defaults to the config's.
        #[arg(long)]
        tau: Option<f64>,
        /// Where to write per-image scores.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Run the whole policy × N_aug × seed grid and write the report.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Start the review service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Session store; defaults to `<output_dir>/review`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Operator token; also read from INOUT_OPERATOR_TOKEN.
        #[arg(long)]
        token: Option<String>,
        #[arg(long, conflicts_with = "no_adapter")]
        adapter: Option<PathBuf>,
        #[arg(long)]
        no_adapter: bool,
        #[arg(long)]
        alpha: Option<f32>,
        /// Seed of the adapter trained when `--adapter` is not given.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG).context("built-in config")?;
            cfg.output_dir = PathBuf::from("runs").join(&cfg.name);
            cfg
        }
    };
    cfg.apply_env_overrides();
    if let Some(o) = &common.output_dir {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn parse_alpha(alpha: Option<f32>, cfg: &ExperimentConfig) -> Result<MergeWeight> {
    match alpha {
        Some(a) => Ok(MergeWeight::new(a)?),
        None => Ok(cfg.diffusion.alpha()),
    }
}

fn load_manifest(pipeline: &Pipeline, path: Option<&Path>) -> Result<DatasetManifest> {
    match path {
        Some(p) => Ok(DatasetManifest::load(p)?),
        None => Ok(pipeline.dataset()?.clone()),
    }
}

/// Writes samples as PNGs under `dir/images` plus a `dir/fragment.jsonl`
/// listing them.
fn write_samples(dir: &Path, samples: &[ImageSample]) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("images/{}.png", file_stem_for(&s.id));
        s.image.save_png(&dir.join(&rel))?;
        records.push(s.record(Some(rel)));
    }
    let path = dir.join("fragment.jsonl");
    write_fragment(&path, &records)?;
    Ok(path)
}

fn resolve_adapter(
    pipeline: &Pipeline,
    path: Option<&Path>,
    none: bool,
    seed: u64,
) -> Result<Option<LoraAdapter>> {
    Ok(match (path, none) {
        (_, true) => None,
        (Some(p), false) => Some(lora::load_adapter(p)?),
        (None, false) => Some(pipeline.adapter(seed)?.0),
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { common, root, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(root) = root {
                cfg.dataset = DatasetSource::Directory { root, layout: Default::default() };
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.join("dataset"));
            let pipeline = Pipeline::new(cfg)?;
            let m = pipeline.dataset()?;
            let path = m.save(&out)?;
            let c = m.counts();
            println!(
                "wrote {} ({} train negatives, {} train positives, {} test negatives, {} test positives)",
                path.display(),
                c.train.negative,
                c.train.positive,
                c.test.negative,
                c.test.positive
            );
        }
        Command::Finetune { common, seed, epochs, learning_rate, rank, out } => {
            let mut cfg = load_config(&common)?;
            let f = &mut cfg.diffusion.finetune;
            f.epochs = epochs.unwrap_or(f.epochs);
            f.learning_rate = learning_rate.unwrap_or(f.learning_rate);
            f.rank = rank.unwrap_or(f.rank);
            let out = out.unwrap_or_else(|| cfg.output_dir.join("adapters").join(format!("seed-{seed}.safetensors")));
            let pipeline = Pipeline::new(cfg)?;
            let (adapter, record) = pipeline.adapter(seed)?;
            lora::save_adapter(&adapter, &out)?;
            println!("wrote {} (digest {})", out.display(), &record.digest[..16]);
            if let (Some(a), Some(b)) = (record.log.first_epoch_loss(), record.log.final_epoch_loss()) {
                println!("loss {a:.5} -> {b:.5} over {} epochs", record.log.epoch_losses.len());
            }
        }
        Command::Generate { common, prompt, count, alpha, seed, adapter, no_adapter, out } => {
            let cfg = load_config(&common)?;
            let alpha = parse_alpha(alpha, &cfg)?;
            let prompt = prompt
                .or_else(|| cfg.augmentation.prompts.first().cloned())
                .unwrap_or_else(|| cfg.diffusion.finetune.instance_prompt.clone());
            let out = out.unwrap_or_else(|| cfg.output_dir.join("generated"));
            let settings = cfg.diffusion.sampler;
            let pipeline = Pipeline::new(cfg)?;
            let adapter = resolve_adapter(&pipeline, adapter.as_deref(), no_adapter, seed)?;
            let gen = AdapterGenerator { backend: pipeline.backend()?, adapter: adapter.as_ref(), alpha, settings };
            let samples = gen.generate(&prompt, count, derive_seed(seed, "generate"))?;
            let fragment = write_samples(&out, &samples)?;
            println!("wrote {} images for {prompt:?} at alpha {:.2}; fragment {}", samples.len(), alpha.get(), fragment.display());
        }
        Command::AugmentRegion { common, count, seed, out } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("region"));
            let augmenter = RegionAugmenter::new(cfg.region.clone())?;
            let pipeline = Pipeline::new(cfg)?;
            let negatives: Vec<ImageSample> = pipeline.dataset()?.select(Split::Train, Label::Negative).cloned().collect();
            let samples = augmenter.generate(&negatives, count, derive_seed(seed, "augment"))?;
            let fragment = write_samples(&out, &samples)?;
            println!("wrote {} region-augmented images; fragment {}", samples.len(), fragment.display());
        }
        Command::BuildDataset { common, policy, n_aug, scenario, n, seed, out } => {
            let mut cfg = load_config(&common)?;
            let a = &mut cfg.augmentation;
            let policy = policy.or_else(|| a.policies.first().copied()).context("no policy configured")?;
            let n_aug = n_aug.or_else(|| a.n_aug.last().copied()).context("no N_aug configured")?;
            a.policies = vec![policy];
            a.n_aug = vec![n_aug];
            a.scenario = scenario.unwrap_or(a.scenario);
            a.n = n.unwrap_or(a.n);
            cfg.plan(policy, n_aug, seed).validate()?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("datasets").join(format!("{}-{n_aug}-seed-{seed}", policy.label())));
            let plan = cfg.plan(policy, n_aug, seed);
            let pipeline = Pipeline::new(cfg)?;
            let (dataset, _) = pipeline.build(policy, n_aug, seed)?;
            let path = mixer::write_run_dir(&out, &dataset, &plan)?;
            let c = dataset.counts();
            println!(
                "wrote {} ({} train negatives, {} train positives: {} diffusion, {} region)",
                path.display(),
                c.train.negative,
                c.train.positive,
                plan.diffusion_count(),
                plan.region_count()
            );
        }
        Command::Train { common, manifest, seed, epochs, learning_rate, out } => {
            let cfg = load_config(&common)?;
            let mut train = TrainConfig { seed, ..cfg.classifier.clone() };
            train.epochs = epochs.unwrap_or(train.epochs);
            train.learning_rate = learning_rate.unwrap_or(train.learning_rate);
            let out = out.unwrap_or_else(|| cfg.output_dir.join("classifier.safetensors"));
            let pipeline = Pipeline::new(cfg)?;
            let dataset = load_manifest(&pipeline, manifest.as_deref())?;
            let (model, report) = classifier::train_classifier(&dataset, &train)?;
            model.save(&out)?;
            println!("wrote {} (digest {})", out.display(), &model.digest()[..16]);
            if let Some(last) = report.epoch_losses.last() {
                println!("final epoch loss {last:.5}");
            }
        }
        Command::Evaluate { common, model, manifest, seed, tau, scores } => {
            let cfg = load_config(&common)?;
            let tau = tau.unwrap_or(cfg.tau);
            if !(0.0..=1.0).contains(&tau) {
                bail!("tau {tau} outside [0, 1]");
            }
            let pipeline = Pipeline::new(cfg)?;
            let dataset = load_manifest(&pipeline, manifest.as_deref())?;
            let model = Classifier::load(&model)?;
            let result = classifier::predict_scores(&model, &dataset, seed)?;
            if let Some(p) = &scores {
                result.write_jsonl(p)?;
            }
            let s: Vec<f64> = result.scores.iter().map(|&v| v as f64).collect();
            let l: Vec<bool> = result.labels.iter().map(|&v| v == 1).collect();
            let m = MetricsTriple::compute(&s, &l, tau)?;
            let pr = eval::precision_recall_at_threshold(&s, &l, tau)?;
            let out = serde_json::json!({
                "ap": m.ap,
                "precision": m.precision,
                "recall": m.recall,
                "tau": tau,
                "no_predictions": pr.no_predictions,
                "test_images": s.len(),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::RunExperiment { common, workers, seeds } => {
            let mut cfg = load_config(&common)?;
            cfg.workers = workers.unwrap_or(cfg.workers);
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let outcome = run_experiment(&cfg).with_context(|| format!("experiment `{}` failed", cfg.name))?;
            print!("{}", eval::emit_report(&outcome.report, ReportFormat::TextTable));
            println!("report written to {}", cfg.output_dir.join("report.txt").display());
        }
        Command::Serve { common, addr, data_dir, token, adapter, no_adapter, alpha, seed } => {
            let cfg = load_config(&common)?;
            let alpha = parse_alpha(alpha, &cfg)?;
            let data_dir = data_dir.unwrap_or_else(|| cfg.output_dir.join("review"));
            let token = token.or_else(|| std::env::var(ENV_OPERATOR_TOKEN).ok()).filter(|t| !t.is_empty());
            let settings = cfg.diffusion.sampler;
            let pipeline = Pipeline::new(cfg)?;
            let adapter = resolve_adapter(&pipeline, adapter.as_deref(), no_adapter, seed)?;
            let backend: Arc<dyn DenoisingModel> = Arc::new(pipeline.backend()?.clone());
            let source = AdapterSource { backend, adapter, alpha, settings };
            let state = AppState::new(Store::open(&data_dir)?, Arc::new(source), token);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("cannot bind {addr}"))?;
                println!("review service on http://{}", listener.local_addr()?);
                inout_review::serve(listener, state, async {
                    tokio::signal::ctrl_c().await.ok();
                })
                .await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
    }
    Ok(())
}
