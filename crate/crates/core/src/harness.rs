//! Meta-training loop, meta-testing protocol, statistics, reporting, and an
//! end-to-end pipeline driver over the synthetic dataset.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::adaptation::{build_generation_cache, AdaptConfig};
use crate::data::{load_dataset, sample_episode, DatasetIndex, Episode};
use crate::error::{Error, Result};
use crate::fewshot::{
    augment_support, augmentation_baseline, baseline_classify, classify_embedding, episode_loss,
    prepare_episode, prototypes_from_embeddings, AugmentationKind, AugmentedSupportSet, Backbone,
    BackboneConfig, BaselineKind,
};
use crate::fusion::{FusionConfig, FusionNet};
use crate::generator::{pretrain_toy_generator, Generator, GeneratorConfig, PretrainConfig};
use crate::nn::Adam;
use crate::perceptual::{PerceptualConfig, PerceptualNet};
use crate::rng::{derive_seed, derive_seed_indexed};
use crate::synth::{generate_synthetic_dataset, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Prototype,
    NearestNeighbor,
    LogisticOva,
    SoftmaxRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Method name used in reports.
    pub label: String,
    pub n: usize,
    pub m: usize,
    /// Queries per class during evaluation.
    pub q: usize,
    /// Queries per class during meta-training episodes.
    pub train_q: usize,
    pub epochs: usize,
    pub episodes_train: usize,
    /// Validation episodes per epoch (model selection).
    pub episodes_val: usize,
    pub episodes_eval: usize,
    pub n_aug: usize,
    pub augmentation: AugmentationKind,
    pub classifier: ClassifierKind,
    /// Use squared Euclidean distances in the prototype softmax.
    pub squared_distance: bool,
    pub learning_rate: f64,
    /// EMA momentum for backbone BN statistics during training.
    pub stat_momentum: f64,
    pub master_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            label: "metairnet".into(),
            n: 5,
            m: 1,
            q: 16,
            train_q: 5,
            epochs: 3,
            episodes_train: 30,
            episodes_val: 20,
            episodes_eval: 1000,
            n_aug: 1,
            augmentation: AugmentationKind::Fusion,
            classifier: ClassifierKind::Prototype,
            squared_distance: false,
            learning_rate: 1e-3,
            stat_momentum: 0.05,
            master_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("n must be >= 2".into()));
        }
        for (name, v) in [
            ("m", self.m),
            ("q", self.q),
            ("train_q", self.train_q),
            ("epochs", self.epochs),
            ("episodes_train", self.episodes_train),
            ("episodes_val", self.episodes_val),
            ("episodes_eval", self.episodes_eval),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.augmentation == AugmentationKind::Flip && self.n_aug > 1 {
            return Err(Error::Config("flip admits at most one augmented copy".into()));
        }
        Ok(())
    }

    /// Does the configured augmentation read the generation cache?
    pub fn needs_cache(&self) -> bool {
        self.n_aug > 0
            && matches!(
                self.augmentation,
                AugmentationKind::Fusion | AugmentationKind::Mixup | AugmentationKind::Finetunegan
            )
    }
}

// ---- statistics ----

/// Mean and 95% confidence half-width of per-episode accuracies:
/// `ci = 1.96 * stddev / sqrt(len)` with the sample (n-1) standard deviation.
pub fn mean_and_ci95(per_episode: &[f64]) -> (f64, f64) {
    let n = per_episode.len();
    assert!(n > 0, "ci95 of empty sample");
    let mean = per_episode.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Evaluation outcome of one configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Mean accuracy in percent.
    pub mean_accuracy: f64,
    /// 95% confidence half-width in percent.
    pub ci95: f64,
    /// Per-episode accuracy in percent.
    pub per_episode: Vec<f64>,
    pub config: RunConfig,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn from_accuracies(label: &str, per_episode: Vec<f64>, config: RunConfig, secs: f64) -> Self {
        let (mean, ci) = mean_and_ci95(&per_episode);
        EvalReport {
            label: label.to_string(),
            mean_accuracy: mean,
            ci95: ci,
            per_episode,
            config,
            wall_clock_secs: secs,
        }
    }
}

// ---- shared evaluation path ----

fn check_cache_complete(cfg: &RunConfig, index: &DatasetIndex, what: &str) -> Result<()> {
    if !cfg.needs_cache() {
        return Ok(());
    }
    let missing: Vec<&Path> = index
        .records()
        .filter(|(_, r)| r.variants.len() < cfg.n_aug)
        .map(|(_, r)| r.rel_path.as_path())
        .collect();
    if !missing.is_empty() {
        let total = index.image_count();
        log::error!(
            "{what} cache incomplete; missing variants for: {}",
            missing
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        );
        return Err(Error::CacheIncomplete {
            missing: missing.len(),
            total,
            first: missing[0].display().to_string(),
        });
    }
    Ok(())
}

/// Frozen-backbone embedding memo keyed by content identity.
#[derive(Default)]
struct EmbedCache {
    map: HashMap<String, Array1<f64>>,
}

impl EmbedCache {
    fn embed(
        &mut self,
        backbone: &Backbone,
        key: Option<&str>,
        image: &crate::image_io::Image,
    ) -> Result<Array1<f64>> {
        if let Some(k) = key {
            if let Some(hit) = self.map.get(k) {
                return Ok(hit.clone());
            }
        }
        let emb = backbone.embed(image)?;
        if let Some(k) = key {
            self.map.insert(k.to_string(), emb.clone());
        }
        Ok(emb)
    }
}

fn build_support_set(
    cfg: &RunConfig,
    episode: &Episode,
    index: &DatasetIndex,
    cache_root: &Path,
    fusion: &FusionNet,
    backbone: &Backbone,
    seed: u64,
) -> Result<AugmentedSupportSet> {
    match cfg.augmentation {
        AugmentationKind::Fusion => {
            augment_support(episode, index, cache_root, fusion, cfg.n_aug, seed)
        }
        kind => augmentation_baseline(
            episode,
            index,
            cache_root,
            kind,
            cfg.n_aug,
            backbone.feat_dim(),
            seed,
        ),
    }
}

fn evaluate_one_episode(
    cfg: &RunConfig,
    episode: &Episode,
    index: &DatasetIndex,
    cache_root: &Path,
    fusion: &FusionNet,
    backbone: &Backbone,
    cache: &mut EmbedCache,
    seed: u64,
) -> Result<f64> {
    let support = build_support_set(cfg, episode, index, cache_root, fusion, backbone, seed)?;
    let mut semb = ndarray::Array2::<f64>::zeros((support.len(), backbone.feat_dim()));
    for (i, entry) in support.entries.iter().enumerate() {
        let mut e = cache.embed(backbone, entry.cache_key.as_deref(), &entry.image)?;
        if let Some(noise) = &entry.feature_noise {
            e += noise;
        }
        semb.row_mut(i).assign(&e);
    }
    let labels = support.labels();

    let mut qemb = ndarray::Array2::<f64>::zeros((episode.query.len(), backbone.feat_dim()));
    for (i, item) in episode.query.iter().enumerate() {
        let img = index.load_image(&item.record)?;
        let key = item.record.rel_path.display().to_string();
        qemb.row_mut(i)
            .assign(&cache.embed(backbone, Some(&key), &img)?);
    }
    let truth: Vec<usize> = episode.query.iter().map(|i| i.label).collect();

    let preds: Vec<usize> = match cfg.classifier {
        ClassifierKind::Prototype => {
            let protos = prototypes_from_embeddings(semb.view(), &labels, episode.n)?;
            (0..qemb.nrows())
                .map(|i| {
                    let p = classify_embedding(qemb.row(i), protos.view(), cfg.squared_distance)?;
                    Ok(p.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(j, _)| j)
                        .unwrap())
                })
                .collect::<Result<_>>()?
        }
        ClassifierKind::NearestNeighbor => {
            baseline_classify(&semb, &labels, &qemb, BaselineKind::NearestNeighbor)?
        }
        ClassifierKind::LogisticOva => {
            baseline_classify(&semb, &labels, &qemb, BaselineKind::LogisticOva)?
        }
        ClassifierKind::SoftmaxRegression => {
            baseline_classify(&semb, &labels, &qemb, BaselineKind::SoftmaxRegression)?
        }
    };
    let correct = preds.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
    Ok(100.0 * correct as f64 / truth.len() as f64)
}

fn eval_accuracies(
    cfg: &RunConfig,
    index: &DatasetIndex,
    cache_root: &Path,
    fusion: &FusionNet,
    backbone: &Backbone,
    episodes: usize,
    seed_label: &str,
) -> Result<Vec<f64>> {
    let mut cache = EmbedCache::default();
    let mut accs = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let ep_seed = derive_seed_indexed(cfg.master_seed, seed_label, i as u64);
        let episode = sample_episode(index, cfg.n, cfg.m, cfg.q, ep_seed)?;
        // provenance guard: episode classes must come from this split
        for cid in &episode.class_ids {
            if !index.class_ids().contains(&cid.as_str()) {
                return Err(Error::Sampling(format!(
                    "episode class `{cid}` is not part of the evaluated split"
                )));
            }
        }
        let aug_seed = derive_seed(ep_seed, "support-augmentation");
        accs.push(evaluate_one_episode(
            cfg, &episode, index, cache_root, fusion, backbone, &mut cache, aug_seed,
        )?);
    }
    Ok(accs)
}

// ---- training ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub episode_losses: Vec<f64>,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint_path: PathBuf,
}

/// Jointly train the fusion network and backbone with the episodic loss,
/// selecting the checkpoint by validation accuracy.
pub fn meta_train(
    cfg: &RunConfig,
    base: &DatasetIndex,
    val: &DatasetIndex,
    base_cache: &Path,
    val_cache: &Path,
    fusion_cfg: FusionConfig,
    backbone_cfg: BackboneConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_cache_complete(cfg, base, "base split")?;
    check_cache_complete(cfg, val, "validation split")?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let fusion = FusionNet::new(fusion_cfg, derive_seed(cfg.master_seed, "fusion-init"));
    let mut backbone = Backbone::new(backbone_cfg, derive_seed(cfg.master_seed, "backbone-init"));
    let mut fusion = fusion;
    let mut opt_f = Adam::new(&fusion.ps, cfg.learning_rate);
    let mut opt_b = Adam::new(&backbone.ps, cfg.learning_rate);
    // fusion pairs only participate when fusion is the configured augmentation
    let train_n_aug = if cfg.augmentation == AugmentationKind::Fusion {
        cfg.n_aug
    } else {
        0
    };

    let checkpoint_path = out_dir.join("training_state.mirc");
    let mut metrics: Vec<EpochMetrics> = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::with_capacity(cfg.episodes_train);
        for i in 0..cfg.episodes_train {
            let step = (epoch * cfg.episodes_train + i) as u64;
            let ep_seed = derive_seed_indexed(cfg.master_seed, "train-episode", step);
            let episode = sample_episode(base, cfg.n, cfg.m, cfg.train_q, ep_seed)?;
            let prep = prepare_episode(
                &episode,
                base,
                base_cache,
                train_n_aug,
                derive_seed(ep_seed, "train-variants"),
            )?;
            let mut t = crate::tape::Tape::new();
            let ftp = fusion.ps.inject(&mut t);
            let btp = backbone.ps.inject(&mut t);
            let out = episode_loss(&mut t, &prep, &fusion, &ftp, &backbone, &btp, cfg.squared_distance)?;
            let loss = t.scalar(out.loss);
            if !loss.is_finite() {
                return Err(Error::Divergence { step: step as usize });
            }
            let grads = t.backward(out.loss);
            opt_f.step(&mut fusion.ps, &ftp, &grads);
            opt_b.step(&mut backbone.ps, &btp, &grads);
            backbone.refresh_stats(&t, &out.conv_outs, cfg.stat_momentum);
            losses.push(loss);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;

        let val_accs = eval_accuracies(
            cfg,
            val,
            val_cache,
            &fusion,
            &backbone,
            cfg.episodes_val,
            "val-episode",
        )?;
        let (val_accuracy, _) = mean_and_ci95(&val_accs);
        log::info!("epoch {epoch}: train loss {train_loss:.4}, val accuracy {val_accuracy:.2}%");
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            episode_losses: losses,
            val_accuracy,
        });
        if val_accuracy > best.1 {
            best = (epoch, val_accuracy);
            save_training_state(
                &checkpoint_path,
                &fusion,
                &backbone,
                &opt_f,
                &opt_b,
                cfg,
                epoch,
                val_accuracy,
            )?;
        }
    }

    let metrics_path = out_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    std::fs::write(&metrics_path, text).map_err(|e| Error::io(&metrics_path, e))?;

    Ok(TrainOutcome {
        best_epoch: best.0,
        best_val_accuracy: best.1,
        metrics,
        checkpoint_path,
    })
}

// ---- training-state checkpointing ----

const STATE_ARCH: &str = "fusion-and-backbone-v1";

#[allow(clippy::too_many_arguments)]
pub fn save_training_state(
    path: &Path,
    fusion: &FusionNet,
    backbone: &Backbone,
    opt_f: &Adam,
    opt_b: &Adam,
    cfg: &RunConfig,
    epoch: usize,
    val_accuracy: f64,
) -> Result<()> {
    let descriptor = serde_json::json!({
        "arch": STATE_ARCH,
        "fusion_config": fusion.cfg,
        "backbone_config": backbone.cfg,
        "run_config": cfg,
        "epoch": epoch,
        "val_accuracy": val_accuracy,
    });
    let mut blobs = Vec::new();
    for (name, value) in fusion.ps.named_blobs() {
        blobs.push((format!("fusion/{name}"), value));
    }
    for (name, value) in backbone.ps.named_blobs() {
        blobs.push((format!("backbone/{name}"), value));
    }
    for (name, value) in opt_f.state_blobs() {
        blobs.push((format!("opt.fusion/{name}"), value));
    }
    for (name, value) in opt_b.state_blobs() {
        blobs.push((format!("opt.backbone/{name}"), value));
    }
    crate::checkpoint::write_checkpoint(path, &descriptor, &blobs)
}

pub struct TrainingState {
    pub fusion: FusionNet,
    pub backbone: Backbone,
    pub run_config: RunConfig,
    pub epoch: usize,
    pub val_accuracy: f64,
    /// Optimizer moments, for resuming (`opt.fusion/...`, `opt.backbone/...`).
    pub optimizer_blobs: Vec<(String, ndarray::ArrayD<f64>)>,
}

pub fn load_training_state(path: &Path) -> Result<TrainingState> {
    let (descriptor, blobs) = crate::checkpoint::read_checkpoint(path)?;
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if descriptor.get("arch").and_then(|v| v.as_str()) != Some(STATE_ARCH) {
        return Err(bad(format!("not a training-state checkpoint: {descriptor}")));
    }
    let fusion_cfg: FusionConfig =
        serde_json::from_value(descriptor["fusion_config"].clone()).map_err(|e| bad(e.to_string()))?;
    let backbone_cfg: BackboneConfig = serde_json::from_value(descriptor["backbone_config"].clone())
        .map_err(|e| bad(e.to_string()))?;
    let run_config: RunConfig =
        serde_json::from_value(descriptor["run_config"].clone()).map_err(|e| bad(e.to_string()))?;
    let epoch = descriptor["epoch"].as_u64().unwrap_or(0) as usize;
    let val_accuracy = descriptor["val_accuracy"].as_f64().unwrap_or(f64::NAN);

    let mut fusion = FusionNet::new(fusion_cfg, 0);
    let mut backbone = Backbone::new(backbone_cfg, 0);
    let strip = |prefix: &str| -> Vec<(String, ndarray::ArrayD<f64>)> {
        blobs
            .iter()
            .filter_map(|(n, v)| n.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    };
    fusion.ps.load_blobs(&strip("fusion/")).map_err(&bad)?;
    backbone.ps.load_blobs(&strip("backbone/")).map_err(&bad)?;
    let optimizer_blobs = blobs
        .iter()
        .filter(|(n, _)| n.starts_with("opt."))
        .cloned()
        .collect();
    Ok(TrainingState {
        fusion,
        backbone,
        run_config,
        epoch,
        val_accuracy,
        optimizer_blobs,
    })
}

// ---- testing ----

/// Evaluate a trained model on the novel split.
pub fn meta_test(
    cfg: &RunConfig,
    fusion: &FusionNet,
    backbone: &Backbone,
    novel: &DatasetIndex,
    novel_cache: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    check_cache_complete(cfg, novel, "novel split")?;
    let start = Instant::now();
    let accs = eval_accuracies(
        cfg,
        novel,
        novel_cache,
        fusion,
        backbone,
        cfg.episodes_eval,
        "test-episode",
    )?;
    Ok(EvalReport::from_accuracies(
        &cfg.label,
        accs,
        cfg.clone(),
        start.elapsed().as_secs_f64(),
    ))
}

pub fn meta_test_from_checkpoint(
    checkpoint: &Path,
    cfg: &RunConfig,
    novel: &DatasetIndex,
    novel_cache: &Path,
) -> Result<EvalReport> {
    let state = load_training_state(checkpoint)?;
    meta_test(cfg, &state.fusion, &state.backbone, novel, novel_cache)
}

// ---- reporting ----

/// Render a comparison table of evaluation reports. Differences in episode
/// shape or count relative to the first report are flagged.
pub fn render_report(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Usage("report needs at least one evaluation result".into()));
    }
    let label_w = reports
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap()
        .max("method".len());
    let mut out = String::new();
    out.push_str(&format!(
        "{:<label_w$}  {:>8}  {:>7}  {:>8}\n",
        "method", "acc %", "ci95", "episodes"
    ));
    let mut warnings = Vec::new();
    let first = &reports[0].config;
    for r in reports {
        out.push_str(&format!(
            "{:<label_w$}  {:>8.2}  {:>7}  {:>8}\n",
            r.label,
            r.mean_accuracy,
            format!("±{:.2}", r.ci95),
            r.per_episode.len(),
        ));
        let c = &r.config;
        if (c.n, c.m, c.q, c.episodes_eval) != (first.n, first.m, first.q, first.episodes_eval) {
            warnings.push(format!(
                "warning: `{}` ran {}-way {}-shot q={} over {} episodes, \
                 first report used {}-way {}-shot q={} over {}",
                r.label, c.n, c.m, c.q, c.episodes_eval, first.n, first.m, first.q,
                first.episodes_eval
            ));
        }
    }
    for w in warnings {
        out.push_str(&w);
        out.push('\n');
    }
    Ok(out)
}

pub fn report_json(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Usage("report needs at least one evaluation result".into()));
    }
    Ok(serde_json::to_string_pretty(reports).expect("reports serialize"))
}

// ---- end-to-end pipeline ----

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub generator: GeneratorConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub perceptual: PerceptualConfig,
    pub fusion: FusionConfig,
    pub backbone: BackboneConfig,
    pub run: RunConfig,
}

/// Run the full pipeline inside `workdir`: synthesize the dataset, pretrain
/// the generator, build generation caches, meta-train, and meta-test. Every
/// stage is keyed off `run.master_seed` and skips work already on disk, so a
/// rerun in a fresh directory reproduces the same report.
pub fn run_pipeline(workdir: &Path, pc: &PipelineConfig) -> Result<EvalReport> {
    pc.run.validate()?;
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let data_root = workdir.join("data");
    if !data_root.join("split.txt").exists() {
        let mut synth = pc.synth.clone();
        synth.seed = derive_seed(pc.run.master_seed, "synth-data");
        generate_synthetic_dataset(&data_root, &synth)?;
    }
    let (mut base, mut val, mut novel) = load_dataset(&data_root, &data_root.join("split.txt"))?;

    let perceptual = PerceptualNet::new(pc.perceptual.clone());
    let gen_path = workdir.join("generator.mirc");
    let generator = if gen_path.exists() {
        Generator::load(&gen_path)?
    } else {
        let result = pretrain_toy_generator(
            &base,
            pc.generator.clone(),
            &pc.pretrain,
            &perceptual,
            derive_seed(pc.run.master_seed, "gan-pretrain"),
        )?;
        result.generator.save(&gen_path)?;
        result.generator
    };

    let base_cache = workdir.join("cache-base");
    let val_cache = workdir.join("cache-val");
    let novel_cache = workdir.join("cache-novel");
    if pc.run.needs_cache() {
        for (index, cache, label) in [
            (&mut base, &base_cache, "cache-base"),
            (&mut val, &val_cache, "cache-val"),
            (&mut novel, &novel_cache, "cache-novel"),
        ] {
            let summary = build_generation_cache(
                index,
                &generator,
                &perceptual,
                &pc.adapt,
                cache,
                derive_seed(pc.run.master_seed, label),
            )?;
            if !summary.failures.is_empty() {
                log::warn!("{label}: {} image(s) failed to adapt", summary.failures.len());
            }
        }
    }

    let outcome = meta_train(
        &pc.run,
        &base,
        &val,
        &base_cache,
        &val_cache,
        pc.fusion.clone(),
        pc.backbone.clone(),
        &workdir.join("train"),
    )?;
    meta_test_from_checkpoint(&outcome.checkpoint_path, &pc.run, &novel, &novel_cache)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci95_hand_case() {
        let (mean, ci) = mean_and_ci95(&[50.0, 60.0, 70.0]);
        assert!((mean - 60.0).abs() < 1e-12);
        assert!((ci - 1.96 * 10.0 / 3.0_f64.sqrt()).abs() < 1e-12);
        assert!((ci - 11.316).abs() < 1e-3);
    }

    #[test]
    fn ci95_degenerate_cases() {
        let (mean, ci) = mean_and_ci95(&[100.0; 10]);
        assert_eq!(mean, 100.0);
        assert_eq!(ci, 0.0);
        let (mean, ci) = mean_and_ci95(&[42.0]);
        assert_eq!(mean, 42.0);
        assert_eq!(ci, 0.0);
    }

    #[test]
    fn run_config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.n = 1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.episodes_eval = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.augmentation = AugmentationKind::Flip;
        c.n_aug = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn report_table_and_mismatch_flag() {
        let mk = |label: &str, q: usize| {
            let mut cfg = RunConfig::default();
            cfg.q = q;
            EvalReport::from_accuracies(label, vec![50.0, 60.0], cfg, 1.0)
        };
        let a = mk("proto", 16);
        let b = mk("metairnet", 8);
        let table = render_report(&[a.clone(), b]).unwrap();
        assert!(table.contains("proto"));
        assert!(table.contains("metairnet"));
        assert!(table.contains("warning"));
        let table = render_report(&[a.clone(), a]).unwrap();
        assert!(!table.contains("warning"));
        assert!(matches!(render_report(&[]), Err(Error::Usage(_))));
        assert!(matches!(report_json(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn all_correct_report() {
        let r = EvalReport::from_accuracies(
            "stub",
            vec![100.0; 25],
            RunConfig::default(),
            0.0,
        );
        assert_eq!(r.mean_accuracy, 100.0);
        assert_eq!(r.ci95, 0.0);
    }
}
