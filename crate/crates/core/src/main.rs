//! Command-line front end: dataset synthesis, generator pretraining,
//! generation-cache building, meta-training, meta-testing, and report
//! rendering.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use metairnet::adaptation::{build_generation_cache, AdaptConfig};
use metairnet::data::load_dataset;
use metairnet::error::{Error, Result};
use metairnet::fewshot::{AugmentationKind, BackboneConfig};
use metairnet::fusion::FusionConfig;
use metairnet::generator::{pretrain_toy_generator, Generator, GeneratorConfig, PretrainConfig};
use metairnet::harness::{
    meta_test_from_checkpoint, meta_train, render_report, report_json, ClassifierKind, EvalReport,
    RunConfig,
};
use metairnet::perceptual::{PerceptualConfig, PerceptualNet};
use metairnet::synth::{generate_synthetic_dataset, SynthConfig};

#[derive(Parser)]
#[command(
    name = "metairnet",
    about = "One-shot classification with generator fine-tuning and learned grid fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes-and-textures dataset with a split file.
    MakeData(MakeDataArgs),
    /// Pretrain the toy conditional generator on the base split.
    PretrainGan(PretrainArgs),
    /// Adapt the generator to every image of one split and cache the variants.
    Adapt(AdaptArgs),
    /// Meta-train the fusion network and backbone; keep the best-validation
    /// checkpoint.
    MetaTrain(MetaTrainArgs),
    /// Evaluate a training-state checkpoint on the novel split.
    MetaTest(MetaTestArgs),
    /// Render a comparison table from saved evaluation reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    base_classes: usize,
    #[arg(long, default_value_t = 6)]
    val_classes: usize,
    #[arg(long, default_value_t = 10)]
    novel_classes: usize,
    #[arg(long, default_value_t = 30)]
    images_per_class: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root (one directory per class).
    #[arg(long)]
    data: PathBuf,
    /// Split file; defaults to `<data>/split.txt`.
    #[arg(long)]
    split: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<(metairnet::data::DatasetIndex, metairnet::data::DatasetIndex, metairnet::data::DatasetIndex)> {
        let split = self.split.clone().unwrap_or_else(|| self.data.join("split.txt"));
        load_dataset(&self.data, &split)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output generator checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.003)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Which split to adapt: base, val, or novel.
    #[arg(long, default_value = "novel")]
    split_name: String,
    /// Pretrained generator checkpoint.
    #[arg(long)]
    generator: PathBuf,
    /// Cache directory for generated variants.
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr_z: f64,
    #[arg(long, default_value_t = 0.0005)]
    lr_bn: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_p: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_z: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon_scale: f64,
    /// Variants to emit per source image.
    #[arg(long, default_value_t = 10)]
    n_variants: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON file whose fields override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "metairnet")]
    label: String,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[arg(long, default_value_t = 16)]
    q: usize,
    #[arg(long, default_value_t = 5)]
    train_q: usize,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 30)]
    episodes_train: usize,
    #[arg(long, default_value_t = 20)]
    episodes_val: usize,
    #[arg(long, default_value_t = 1000)]
    episodes_eval: usize,
    #[arg(long, default_value_t = 1)]
    n_aug: usize,
    /// none | fusion | flip | gaussian | mixup | finetunegan
    #[arg(long, default_value = "fusion")]
    augmentation: String,
    /// prototype | nearest_neighbor | logistic_ova | softmax_regression
    #[arg(long, default_value = "prototype")]
    classifier: String,
    /// Use squared Euclidean distances in the prototype softmax.
    #[arg(long, default_value_t = false)]
    squared_distance: bool,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.05)]
    stat_momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RunArgs {
    fn to_config(&self) -> Result<RunConfig> {
        let augmentation = match self.augmentation.as_str() {
            "none" => AugmentationKind::None,
            "fusion" => AugmentationKind::Fusion,
            "flip" => AugmentationKind::Flip,
            "gaussian" => AugmentationKind::Gaussian,
            "mixup" => AugmentationKind::Mixup,
            "finetunegan" => AugmentationKind::Finetunegan,
            other => return Err(Error::Usage(format!("unknown augmentation `{other}`"))),
        };
        let classifier = match self.classifier.as_str() {
            "prototype" => ClassifierKind::Prototype,
            "nearest_neighbor" => ClassifierKind::NearestNeighbor,
            "logistic_ova" => ClassifierKind::LogisticOva,
            "softmax_regression" => ClassifierKind::SoftmaxRegression,
            other => return Err(Error::Usage(format!("unknown classifier `{other}`"))),
        };
        let mut cfg = RunConfig {
            label: self.label.clone(),
            n: self.n,
            m: self.m,
            q: self.q,
            train_q: self.train_q,
            epochs: self.epochs,
            episodes_train: self.episodes_train,
            episodes_val: self.episodes_val,
            episodes_eval: self.episodes_eval,
            n_aug: self.n_aug,
            augmentation,
            classifier,
            squared_distance: self.squared_distance,
            learning_rate: self.learning_rate,
            stat_momentum: self.stat_momentum,
            master_seed: self.seed,
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let overrides: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad config file {}: {e}", path.display())))?;
            let mut merged = serde_json::to_value(&cfg).expect("config serializes");
            let (Some(obj), Some(base)) = (overrides.as_object(), merged.as_object_mut()) else {
                return Err(Error::Config("config file must hold a JSON object".into()));
            };
            for (k, v) in obj {
                if !base.contains_key(k) {
                    return Err(Error::Config(format!("unknown config field `{k}`")));
                }
                base.insert(k.clone(), v.clone());
            }
            cfg = serde_json::from_value(merged)
                .map_err(|e| Error::Config(format!("bad config value: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct MetaTrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    base_cache: PathBuf,
    #[arg(long)]
    val_cache: PathBuf,
    /// Output directory for the training-state checkpoint and metrics.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct MetaTestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    novel_cache: PathBuf,
    /// Where to write the evaluation report (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation-report JSON files.
    reports: Vec<PathBuf>,
    /// Also print the merged reports as JSON.
    #[arg(long)]
    json: bool,
}

fn apply_cache(index: &mut metairnet::data::DatasetIndex, cache: &PathBuf) -> Result<()> {
    let manifest = metairnet::adaptation::CacheManifest::load(cache)?;
    manifest.apply_to_index(index);
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::MakeData(a) => {
            let cfg = SynthConfig {
                base_classes: a.base_classes,
                val_classes: a.val_classes,
                novel_classes: a.novel_classes,
                images_per_class: a.images_per_class,
                resolution: a.resolution,
                seed: a.seed,
            };
            let spec = generate_synthetic_dataset(&a.out, &cfg)?;
            println!(
                "wrote {} classes ({} base / {} val / {} novel) under {}",
                spec.base_classes.len() + spec.val_classes.len() + spec.novel_classes.len(),
                spec.base_classes.len(),
                spec.val_classes.len(),
                spec.novel_classes.len(),
                a.out.display()
            );
        }
        Command::PretrainGan(a) => {
            let (base, _, _) = a.data.load()?;
            let cfg = PretrainConfig {
                steps: a.steps,
                batch_size: a.batch_size,
                lr: a.lr,
                ..Default::default()
            };
            let perceptual = PerceptualNet::new(PerceptualConfig::default());
            let result =
                pretrain_toy_generator(&base, GeneratorConfig::default(), &cfg, &perceptual, a.seed)?;
            result.generator.save(&a.out)?;
            let last = result.loss_curve.last().copied().unwrap_or(f64::NAN);
            println!(
                "pretrained generator over {} steps (final loss {last:.4}) -> {}",
                result.loss_curve.len(),
                a.out.display()
            );
        }
        Command::Adapt(a) => {
            let (base, val, novel) = a.data.load()?;
            let mut index = match a.split_name.as_str() {
                "base" => base,
                "val" => val,
                "novel" => novel,
                other => return Err(Error::Usage(format!("unknown split `{other}`"))),
            };
            let generator = Generator::load(&a.generator)?;
            let perceptual = PerceptualNet::new(PerceptualConfig::default());
            let cfg = AdaptConfig {
                steps: a.steps,
                lr_z: a.lr_z,
                lr_bn: a.lr_bn,
                lambda_p: a.lambda_p,
                lambda_z: a.lambda_z,
                epsilon_scale: a.epsilon_scale,
                n_variants: a.n_variants,
            };
            let summary =
                build_generation_cache(&mut index, &generator, &perceptual, &cfg, &a.cache, a.seed)?;
            println!(
                "cache {}: {} adapted, {} already present, {} failed",
                a.cache.display(),
                summary.completed,
                summary.skipped,
                summary.failures.len()
            );
            for (path, reason) in &summary.failures {
                eprintln!("  failed {}: {reason}", path.display());
            }
            if !summary.failures.is_empty() {
                return Err(Error::Adaptation {
                    step: 0,
                    reason: format!("{} image(s) failed to adapt", summary.failures.len()),
                });
            }
        }
        Command::MetaTrain(a) => {
            let cfg = a.run.to_config()?;
            let (mut base, mut val, _) = a.data.load()?;
            apply_cache(&mut base, &a.base_cache)?;
            apply_cache(&mut val, &a.val_cache)?;
            let outcome = meta_train(
                &cfg,
                &base,
                &val,
                &a.base_cache,
                &a.val_cache,
                FusionConfig::default(),
                BackboneConfig::default(),
                &a.out,
            )?;
            println!(
                "best epoch {} (val accuracy {:.2}%) -> {}",
                outcome.best_epoch,
                outcome.best_val_accuracy,
                outcome.checkpoint_path.display()
            );
        }
        Command::MetaTest(a) => {
            let cfg = a.run.to_config()?;
            let (_, _, mut novel) = a.data.load()?;
            apply_cache(&mut novel, &a.novel_cache)?;
            let report = meta_test_from_checkpoint(&a.checkpoint, &cfg, &novel, &a.novel_cache)?;
            println!(
                "{}: {:.2} ± {:.2} % over {} episodes ({:.1}s)",
                report.label,
                report.mean_accuracy,
                report.ci95,
                report.per_episode.len(),
                report.wall_clock_secs
            );
            if let Some(out) = &a.out {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
            }
        }
        Command::Report(a) => {
            let mut reports: Vec<EvalReport> = Vec::new();
            for path in &a.reports {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                reports.push(serde_json::from_str(&text).map_err(|e| {
                    Error::Config(format!("bad report {}: {e}", path.display()))
                })?);
            }
            print!("{}", render_report(&reports)?);
            if a.json {
                println!("{}", report_json(&reports)?);
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::init();
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
