//! Episodic prototype classifier and the comparison classifiers around it:
//! augmented-support construction, class prototypes, distance-softmax
//! prediction, the episodic training loss, nearest-neighbor / logistic /
//! softmax-regression baselines, and the simple augmentation baselines
//! (flip, feature-space gaussian noise, mixup, raw generated variants).

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Ix2, Ix4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetIndex, Episode, ImageRecord};
use crate::error::{Error, Result};
use crate::fusion::FusionNet;
use crate::image_io::Image;
use crate::nn::{BatchNorm2d, Conv2d, ParamSet, TapedParams};
use crate::rng::rng_from_seed;
use crate::tape::{Tape, Var};

// ---- backbone ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// Output channels per conv block; each block halves resolution, so the
    /// input side length must be divisible by 2^len. Four blocks by default.
    pub channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![16, 16, 16, 16],
        }
    }
}

struct BackboneBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Convolutional embedding network: conv + BN + ReLU + max-pool per block,
/// global average pooling at the end. BN normalizes with stored running
/// statistics; [`Backbone::refresh_stats`] updates them during training.
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub ps: ParamSet,
    blocks: Vec<BackboneBlock>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut ps = ParamSet::new();
        let mut blocks = Vec::new();
        let mut ci = 3;
        for (i, &co) in cfg.channels.iter().enumerate() {
            let conv = Conv2d::new(&mut ps, &format!("backbone.block{i}"), ci, co, &mut rng);
            let bn = BatchNorm2d::new(&mut ps, &format!("backbone.block{i}"), co);
            blocks.push(BackboneBlock { conv, bn });
            ci = co;
        }
        Backbone { cfg, ps, blocks }
    }

    pub fn feat_dim(&self) -> usize {
        *self.cfg.channels.last().expect("at least one block")
    }

    fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.blocks.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Precondition(format!(
                "backbone input {h}x{w} not divisible by {div}"
            )));
        }
        Ok(())
    }

    /// Tape forward over a batch `[n, 3, h, w]` -> (`[n, feat]`, pre-BN conv
    /// activations per block for statistics refresh).
    pub fn forward(&self, t: &mut Tape, tp: &TapedParams, x: Var) -> (Var, Vec<Var>) {
        let mut conv_outs = Vec::new();
        let mut cur = x;
        for block in &self.blocks {
            let c = block.conv.forward(t, tp, cur);
            conv_outs.push(c);
            let b = block.bn.forward(t, tp, &self.ps, c);
            let r = t.relu(b);
            cur = t.max_pool2(r);
        }
        (t.global_avg_pool(cur), conv_outs)
    }

    /// EMA update of every block's running statistics from the pre-BN
    /// activations a forward pass returned.
    pub fn refresh_stats(&mut self, t: &Tape, conv_outs: &[Var], momentum: f64) {
        let bns: Vec<BatchNorm2d> = self.blocks.iter().map(|b| b.bn.clone()).collect();
        for (bn, &var) in bns.iter().zip(conv_outs.iter()) {
            let batch = t.value(var).clone().into_dimensionality::<Ix4>().unwrap();
            bn.update_stats(&mut self.ps, &batch, momentum);
        }
    }

    /// Embed a batch of equally-sized images (inference, no gradients).
    pub fn embed_batch(&self, images: &[&Image]) -> Result<Array2<f64>> {
        if images.is_empty() {
            return Err(Error::Precondition("embed_batch: empty batch".into()));
        }
        let (c, h, w) = images[0].shape();
        if c != 3 {
            return Err(Error::Shape {
                expected: "3 channels".into(),
                got: format!("{c}"),
            });
        }
        self.check_resolution(h, w)?;
        for img in images {
            if img.shape() != (c, h, w) {
                return Err(Error::Shape {
                    expected: format!("{:?}", (c, h, w)),
                    got: format!("{:?}", img.shape()),
                });
            }
        }
        let mut t = Tape::new();
        let tp = self.ps.inject(&mut t);
        let parts: Vec<Var> = images.iter().map(|img| t.leaf3(img.data.clone())).collect();
        let batch = t.stack(&parts);
        let (emb, _) = self.forward(&mut t, &tp, batch);
        Ok(t.value(emb).clone().into_dimensionality::<Ix2>().unwrap())
    }

    pub fn embed(&self, image: &Image) -> Result<Array1<f64>> {
        let emb = self.embed_batch(&[image])?;
        Ok(emb.row(0).to_owned())
    }
}

// ---- embedding-level classification ----

/// Softmax over negative distances, numerically stabilized.
pub fn softmax_neg_dist(dists: ArrayView1<f64>) -> Array1<f64> {
    let dmin = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Array1<f64> = dists.mapv(|d| (-(d - dmin)).exp());
    let z = exps.sum();
    exps / z
}

/// Per-class mean embeddings. `labels[i]` is the class of row `i` of `emb`;
/// every class in `0..n` must be represented.
pub fn prototypes_from_embeddings(
    emb: ArrayView2<f64>,
    labels: &[usize],
    n: usize,
) -> Result<Array2<f64>> {
    if emb.nrows() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", emb.nrows()),
            got: format!("{}", labels.len()),
        });
    }
    let d = emb.ncols();
    let mut out = Array2::<f64>::zeros((n, d));
    let mut counts = vec![0usize; n];
    for (row, &label) in emb.rows().into_iter().zip(labels.iter()) {
        if label >= n {
            return Err(Error::Classifier(format!("label {label} out of range 0..{n}")));
        }
        let mut acc = out.row_mut(label);
        acc += &row;
        counts[label] += 1;
    }
    for (label, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Classifier(format!("class {label} has no support entries")));
        }
        let mut row = out.row_mut(label);
        row /= count as f64;
    }
    Ok(out)
}

/// Probability of each class for one query embedding: softmax over negative
/// Euclidean distances to the prototypes. `squared` switches to squared
/// distances.
pub fn classify_embedding(
    query: ArrayView1<f64>,
    protos: ArrayView2<f64>,
    squared: bool,
) -> Result<Array1<f64>> {
    if protos.nrows() == 0 {
        return Err(Error::Classifier("no prototypes".into()));
    }
    if protos.ncols() != query.len() {
        return Err(Error::Shape {
            expected: format!("{}", protos.ncols()),
            got: format!("{}", query.len()),
        });
    }
    let dists = Array1::from_shape_fn(protos.nrows(), |j| {
        let s: f64 = query
            .iter()
            .zip(protos.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if squared {
            s
        } else {
            s.sqrt()
        }
    });
    Ok(softmax_neg_dist(dists.view()))
}

// ---- augmented support sets ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Real,
    Fused,
    Flipped,
    FeatureNoise,
    Mixed,
    Variant,
}

#[derive(Debug, Clone)]
pub struct SupportEntry {
    pub image: Image,
    pub label: usize,
    pub origin: Origin,
    /// Additive embedding-space noise (feature-level gaussian baseline only).
    pub feature_noise: Option<Array1<f64>>,
    /// Stable identity of the pixel content, when it has one (source path or
    /// a derived tag). Lets evaluation memoize frozen-backbone embeddings.
    /// `None` for content that depends on episode randomness.
    pub cache_key: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AugmentedSupportSet {
    pub n: usize,
    pub entries: Vec<SupportEntry>,
}

impl AugmentedSupportSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Embed every entry, applying stored feature noise where present.
    pub fn embed_all(&self, backbone: &Backbone) -> Result<Array2<f64>> {
        let images: Vec<&Image> = self.entries.iter().map(|e| &e.image).collect();
        let mut emb = backbone.embed_batch(&images)?;
        for (i, entry) in self.entries.iter().enumerate() {
            if let Some(noise) = &entry.feature_noise {
                let mut row = emb.row_mut(i);
                row += noise;
            }
        }
        Ok(emb)
    }
}

/// Pick `count` distinct cached variants of a record, uniformly at random.
fn choose_variants(
    record: &ImageRecord,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<std::path::PathBuf>> {
    if record.variants.is_empty() {
        return Err(Error::MissingCacheEntry {
            image: record.rel_path.display().to_string(),
        });
    }
    if count > record.variants.len() {
        return Err(Error::Precondition(format!(
            "requested {count} variants of `{}`, cache holds {}",
            record.rel_path.display(),
            record.variants.len()
        )));
    }
    let mut order: Vec<usize> = (0..record.variants.len()).collect();
    order.shuffle(rng);
    Ok(order[..count].iter().map(|&i| record.variants[i].clone()).collect())
}

/// Build the augmented support set for an episode: every real support image
/// plus `n_aug` fused images per real image. Variants are drawn uniformly
/// without replacement from the generation cache.
pub fn augment_support(
    episode: &Episode,
    index: &DatasetIndex,
    cache_root: &Path,
    fusion: &FusionNet,
    n_aug: usize,
    seed: u64,
) -> Result<AugmentedSupportSet> {
    let mut rng = rng_from_seed(seed);
    let mut entries = Vec::with_capacity(episode.support.len() * (1 + n_aug));
    for item in &episode.support {
        let real = index.load_image(&item.record)?;
        if n_aug > 0 {
            for rel in choose_variants(&item.record, n_aug, &mut rng)? {
                let variant = Image::load_png(&cache_root.join(&rel))?;
                let fused = fusion.fuse_pair(&real, &variant)?;
                entries.push(SupportEntry {
                    image: fused,
                    label: item.label,
                    origin: Origin::Fused,
                    feature_noise: None,
                    // valid only while the fusion parameters stay frozen
                    cache_key: Some(format!(
                        "fused:{}:{}",
                        item.record.rel_path.display(),
                        rel.display()
                    )),
                });
            }
        }
        entries.push(SupportEntry {
            image: real,
            label: item.label,
            origin: Origin::Real,
            feature_noise: None,
            cache_key: Some(item.record.rel_path.display().to_string()),
        });
    }
    Ok(AugmentedSupportSet {
        n: episode.n,
        entries,
    })
}

/// Class prototypes of an augmented support set under a backbone.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub centroids: Array2<f64>,
}

pub fn compute_prototypes(support: &AugmentedSupportSet, backbone: &Backbone) -> Result<PrototypeSet> {
    if support.is_empty() {
        return Err(Error::Classifier("empty support set".into()));
    }
    let emb = support.embed_all(backbone)?;
    let centroids = prototypes_from_embeddings(emb.view(), &support.labels(), support.n)?;
    Ok(PrototypeSet { centroids })
}

pub fn classify_query(
    query: &Image,
    protos: &PrototypeSet,
    backbone: &Backbone,
    squared: bool,
) -> Result<Array1<f64>> {
    let emb = backbone.embed(query)?;
    classify_embedding(emb.view(), protos.centroids.view(), squared)
}

// ---- episodic training loss ----

/// One episode with all pixel data loaded and variants already chosen, ready
/// for a differentiable forward pass.
pub struct PreparedEpisode {
    pub n: usize,
    /// Real support images with labels.
    pub support: Vec<(Image, usize)>,
    /// (support index, variant image) pairs to fuse on the tape.
    pub fusion_pairs: Vec<(usize, Image)>,
    pub query: Vec<(Image, usize)>,
}

pub fn prepare_episode(
    episode: &Episode,
    index: &DatasetIndex,
    cache_root: &Path,
    n_aug: usize,
    seed: u64,
) -> Result<PreparedEpisode> {
    let mut rng = rng_from_seed(seed);
    let mut support = Vec::with_capacity(episode.support.len());
    let mut fusion_pairs = Vec::new();
    for (si, item) in episode.support.iter().enumerate() {
        support.push((index.load_image(&item.record)?, item.label));
        if n_aug > 0 {
            for rel in choose_variants(&item.record, n_aug, &mut rng)? {
                fusion_pairs.push((si, Image::load_png(&cache_root.join(rel))?));
            }
        }
    }
    let mut query = Vec::with_capacity(episode.query.len());
    for item in &episode.query {
        query.push((index.load_image(&item.record)?, item.label));
    }
    Ok(PreparedEpisode {
        n: episode.n,
        support,
        fusion_pairs,
        query,
    })
}

pub struct EpisodeOutput {
    pub loss: Var,
    /// Fraction of queries whose nearest prototype carries the true label.
    pub accuracy: f64,
    /// Pre-BN backbone activations (support then query) for stats refresh.
    pub conv_outs: Vec<Var>,
}

/// Differentiable episode loss: mean cross-entropy of the prototype
/// classifier over the query set. Gradients flow to the fusion network and
/// backbone; images (including generated variants) enter as constants, so
/// nothing propagates back to the generator.
pub fn episode_loss(
    t: &mut Tape,
    prep: &PreparedEpisode,
    fusion: &FusionNet,
    ftp: &TapedParams,
    backbone: &Backbone,
    btp: &TapedParams,
    squared: bool,
) -> Result<EpisodeOutput> {
    if prep.support.is_empty() || prep.query.is_empty() {
        return Err(Error::Precondition("episode has empty support or query".into()));
    }
    let mut support_vars: Vec<Var> = Vec::new();
    let mut support_labels: Vec<usize> = Vec::new();
    for (img, label) in &prep.support {
        support_vars.push(t.leaf3(img.data.clone()));
        support_labels.push(*label);
    }
    for (si, variant) in &prep.fusion_pairs {
        let (img, label) = &prep.support[*si];
        support_vars.push(fusion.forward_fused(t, ftp, img, variant)?);
        support_labels.push(*label);
    }
    let support_batch = t.stack(&support_vars);
    let (semb, mut conv_outs) = backbone.forward(t, btp, support_batch);

    let mut proto_vars = Vec::with_capacity(prep.n);
    for label in 0..prep.n {
        let rows: Vec<usize> = support_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(Error::Classifier(format!("class {label} has no support entries")));
        }
        proto_vars.push(t.mean_rows(semb, &rows));
    }
    let protos = t.stack(&proto_vars);

    let query_vars: Vec<Var> = prep.query.iter().map(|(img, _)| t.leaf3(img.data.clone())).collect();
    let query_labels: Vec<usize> = prep.query.iter().map(|(_, l)| *l).collect();
    let query_batch = t.stack(&query_vars);
    let (qemb, conv_outs_q) = backbone.forward(t, btp, query_batch);
    conv_outs.extend(conv_outs_q);

    let dists = t.pairwise_dist(qemb, protos, squared);
    let loss = t.cross_entropy_neg_dist(dists, &query_labels);

    let dv = t.value(dists).clone().into_dimensionality::<Ix2>().unwrap();
    let mut correct = 0usize;
    for (i, &label) in query_labels.iter().enumerate() {
        let pred = dv
            .row(i)
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if pred == label {
            correct += 1;
        }
    }
    Ok(EpisodeOutput {
        loss,
        accuracy: correct as f64 / query_labels.len() as f64,
        conv_outs,
    })
}

// ---- feature-level baseline classifiers ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    NearestNeighbor,
    LogisticOva,
    SoftmaxRegression,
}

/// L2 regularization strength for the logistic / softmax-regression fits.
pub const BASELINE_L2_REG: f64 = 1e-2;
const BASELINE_GD_STEPS: usize = 300;
const BASELINE_GD_LR: f64 = 0.5;

/// Classify query features against support features with a frozen extractor.
/// Nearest neighbor breaks distance ties toward the lowest class index.
pub fn baseline_classify(
    support: &Array2<f64>,
    labels: &[usize],
    query: &Array2<f64>,
    kind: BaselineKind,
) -> Result<Vec<usize>> {
    if support.nrows() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", support.nrows()),
            got: format!("{}", labels.len()),
        });
    }
    if support.ncols() != query.ncols() {
        return Err(Error::Shape {
            expected: format!("{}", support.ncols()),
            got: format!("{}", query.ncols()),
        });
    }
    let n = match labels.iter().max() {
        Some(&m) => m + 1,
        None => return Err(Error::Classifier("empty support".into())),
    };
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Classifier("support covers a single class".into()));
    }

    match kind {
        BaselineKind::NearestNeighbor => {
            let mut preds = Vec::with_capacity(query.nrows());
            for q in query.rows() {
                let mut best = (f64::INFINITY, usize::MAX);
                for (s, &label) in support.rows().into_iter().zip(labels.iter()) {
                    let d: f64 = q.iter().zip(s.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 || (d == best.0 && label < best.1) {
                        best = (d, label);
                    }
                }
                preds.push(best.1);
            }
            Ok(preds)
        }
        BaselineKind::LogisticOva => {
            let d = support.ncols();
            // one regularized binary logistic fit per class, full-batch GD
            let mut scores = Array2::<f64>::zeros((query.nrows(), n));
            for class in 0..n {
                let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { 0.0 }).collect();
                let mut w = Array1::<f64>::zeros(d);
                let mut b = 0.0;
                for _ in 0..BASELINE_GD_STEPS {
                    let mut gw = Array1::<f64>::zeros(d);
                    let mut gb = 0.0;
                    for (row, &yi) in support.rows().into_iter().zip(y.iter()) {
                        let p = 1.0 / (1.0 + (-(row.dot(&w) + b)).exp());
                        let err = p - yi;
                        gw.scaled_add(err, &row);
                        gb += err;
                    }
                    let m = support.nrows() as f64;
                    gw.mapv_inplace(|g| g / m);
                    gw.scaled_add(BASELINE_L2_REG, &w);
                    w.scaled_add(-BASELINE_GD_LR, &gw);
                    b -= BASELINE_GD_LR * gb / m;
                }
                for (i, q) in query.rows().into_iter().enumerate() {
                    scores[[i, class]] = q.dot(&w) + b;
                }
            }
            Ok(argmax_rows(&scores))
        }
        BaselineKind::SoftmaxRegression => {
            let d = support.ncols();
            let mut w = Array2::<f64>::zeros((n, d));
            let mut b = Array1::<f64>::zeros(n);
            for _ in 0..BASELINE_GD_STEPS {
                let mut gw = Array2::<f64>::zeros((n, d));
                let mut gb = Array1::<f64>::zeros(n);
                for (row, &label) in support.rows().into_iter().zip(labels.iter()) {
                    let logits = Array1::from_shape_fn(n, |c| w.row(c).dot(&row) + b[c]);
                    let p = softmax_neg_dist(logits.mapv(|v| -v).view());
                    for c in 0..n {
                        let err = p[c] - if c == label { 1.0 } else { 0.0 };
                        let mut gwc = gw.row_mut(c);
                        gwc.scaled_add(err, &row);
                        gb[c] += err;
                    }
                }
                let m = support.nrows() as f64;
                gw.mapv_inplace(|g| g / m);
                gw.scaled_add(BASELINE_L2_REG, &w);
                w.scaled_add(-BASELINE_GD_LR, &gw);
                gb.mapv_inplace(|g| g / m);
                b.scaled_add(-BASELINE_GD_LR, &gb);
            }
            let mut scores = Array2::<f64>::zeros((query.nrows(), n));
            for (i, q) in query.rows().into_iter().enumerate() {
                for c in 0..n {
                    scores[[i, c]] = w.row(c).dot(&q) + b[c];
                }
            }
            Ok(argmax_rows(&scores))
        }
    }
}

fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap()
        })
        .collect()
}

// ---- augmentation baselines ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    /// No augmentation; support set passes through unchanged.
    None,
    /// Learned fusion of real and generated images.
    Fusion,
    Flip,
    Gaussian,
    Mixup,
    Finetunegan,
}

/// Standard deviation of the feature-space gaussian augmentation.
pub const GAUSSIAN_FEATURE_SIGMA: f64 = 0.01;

/// Build an augmented support set with one of the non-learned baselines.
/// `n_aug` copies are added per real image (flip caps at 1, the mirror).
/// Mixup and raw-variant augmentation need the generation cache.
pub fn augmentation_baseline(
    episode: &Episode,
    index: &DatasetIndex,
    cache_root: &Path,
    kind: AugmentationKind,
    n_aug: usize,
    feat_dim: usize,
    seed: u64,
) -> Result<AugmentedSupportSet> {
    let mut rng = rng_from_seed(seed);
    let mut entries = Vec::new();
    for item in &episode.support {
        let real = index.load_image(&item.record)?;
        match kind {
            AugmentationKind::None => {}
            AugmentationKind::Fusion => {
                return Err(Error::Config(
                    "fusion augmentation goes through augment_support, not the baselines".into(),
                ))
            }
            AugmentationKind::Flip => {
                if n_aug > 0 {
                    entries.push(SupportEntry {
                        image: real.flip_horizontal(),
                        label: item.label,
                        origin: Origin::Flipped,
                        feature_noise: None,
                        cache_key: Some(format!("{}#flip", item.record.rel_path.display())),
                    });
                }
            }
            AugmentationKind::Gaussian => {
                for _ in 0..n_aug {
                    let noise = Array1::from_shape_fn(feat_dim, |_| {
                        sample_gaussian(&mut rng) * GAUSSIAN_FEATURE_SIGMA
                    });
                    entries.push(SupportEntry {
                        image: real.clone(),
                        label: item.label,
                        origin: Origin::FeatureNoise,
                        feature_noise: Some(noise),
                        cache_key: Some(item.record.rel_path.display().to_string()),
                    });
                }
            }
            AugmentationKind::Mixup => {
                for rel in choose_variants(&item.record, n_aug, &mut rng)? {
                    let variant = Image::load_png(&cache_root.join(rel))?;
                    if variant.shape() != real.shape() {
                        return Err(Error::Shape {
                            expected: format!("{:?}", real.shape()),
                            got: format!("{:?}", variant.shape()),
                        });
                    }
                    // single scalar mixing weight per pair
                    let u: f64 = rng.gen_range(0.0..=1.0);
                    let mixed = Image::new(&real.data * u + &variant.data * (1.0 - u));
                    entries.push(SupportEntry {
                        image: mixed,
                        label: item.label,
                        origin: Origin::Mixed,
                        feature_noise: None,
                        cache_key: None,
                    });
                }
            }
            AugmentationKind::Finetunegan => {
                for rel in choose_variants(&item.record, n_aug, &mut rng)? {
                    entries.push(SupportEntry {
                        image: Image::load_png(&cache_root.join(&rel))?,
                        label: item.label,
                        origin: Origin::Variant,
                        feature_noise: None,
                        cache_key: Some(format!("var:{}", rel.display())),
                    });
                }
            }
        }
        entries.push(SupportEntry {
            image: real,
            label: item.label,
            origin: Origin::Real,
            feature_noise: None,
            cache_key: Some(item.record.rel_path.display().to_string()),
        });
    }
    Ok(AugmentedSupportSet {
        n: episode.n,
        entries,
    })
}

fn sample_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_episode;
    use crate::fusion::FusionConfig;
    use ndarray::{arr1, arr2, Array3};

    #[test]
    fn prototype_hand_cases() {
        let emb = arr2(&[[0.0, 0.0], [2.0, 4.0]]);
        let p = prototypes_from_embeddings(emb.view(), &[0, 0], 1).unwrap();
        assert_eq!(p, arr2(&[[1.0, 2.0]]));

        // one entry per class: prototype equals the embedding
        let p = prototypes_from_embeddings(emb.view(), &[0, 1], 2).unwrap();
        assert_eq!(p, emb);

        // order-free
        let emb_rev = arr2(&[[2.0, 4.0], [0.0, 0.0]]);
        let p2 = prototypes_from_embeddings(emb_rev.view(), &[1, 0], 2).unwrap();
        assert_eq!(p2, emb);

        // missing class
        assert!(prototypes_from_embeddings(emb.view(), &[0, 0], 2).is_err());
    }

    #[test]
    fn classify_equidistant_is_uniform() {
        let protos = arr2(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let q = arr1(&[0.0, 0.0]);
        let p = classify_embedding(q.view(), protos.view(), false).unwrap();
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_two_prototype_hand_value() {
        // query on prototype 2 of {(0,0), (3,0)}: distances (3, 0)
        let protos = arr2(&[[0.0, 0.0], [3.0, 0.0]]);
        let q = arr1(&[3.0, 0.0]);
        let p = classify_embedding(q.view(), protos.view(), false).unwrap();
        let expect = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((p[1] - expect).abs() < 1e-9);
        assert!((p[1] - 0.9526).abs() < 1e-4);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let d = arr1(&[1.0, 2.5, 0.3]);
        let shifted = d.mapv(|v| v + 100.0);
        let a = softmax_neg_dist(d.view());
        let b = softmax_neg_dist(shifted.view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn squared_switch_changes_probabilities_not_argmax() {
        let protos = arr2(&[[0.0, 0.0], [2.0, 0.0]]);
        let q = arr1(&[0.5, 0.0]);
        let a = classify_embedding(q.view(), protos.view(), false).unwrap();
        let b = classify_embedding(q.view(), protos.view(), true).unwrap();
        assert!(a[0] > a[1] && b[0] > b[1]);
        assert!((a[0] - b[0]).abs() > 1e-3);
    }

    #[test]
    fn nn_tie_breaks_to_lowest_class() {
        let support = arr2(&[[1.0, 0.0], [-1.0, 0.0]]);
        // class indices deliberately reversed relative to row order
        let preds = baseline_classify(
            &support,
            &[1, 0],
            &arr2(&[[0.0, 0.0]]),
            BaselineKind::NearestNeighbor,
        )
        .unwrap();
        assert_eq!(preds, vec![0]);
    }

    #[test]
    fn softmax_regression_separates_toy_classes() {
        let support = arr2(&[[1.0, 1.0], [1.2, 0.9], [-1.0, -1.0], [-0.8, -1.1]]);
        let labels = [0, 0, 1, 1];
        let query = arr2(&[[0.9, 1.1], [-1.1, -0.9]]);
        for kind in [
            BaselineKind::NearestNeighbor,
            BaselineKind::LogisticOva,
            BaselineKind::SoftmaxRegression,
        ] {
            let preds = baseline_classify(&support, &labels, &query, kind).unwrap();
            assert_eq!(preds, vec![0, 1], "{kind:?}");
        }
    }

    #[test]
    fn single_class_support_rejected() {
        let support = arr2(&[[1.0, 0.0], [2.0, 0.0]]);
        let err = baseline_classify(
            &support,
            &[0, 0],
            &arr2(&[[0.0, 0.0]]),
            BaselineKind::SoftmaxRegression,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Classifier(_)));
    }

    #[test]
    fn one_shot_nn_matches_prototype_argmax() {
        let mut rng = rng_from_seed(11);
        for _ in 0..50 {
            let support = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
            let labels = [0, 1, 2, 3, 4];
            let query = Array2::from_shape_fn((8, 3), |_| rng.gen_range(-1.0..1.0));
            let nn = baseline_classify(&support, &labels, &query, BaselineKind::NearestNeighbor)
                .unwrap();
            let protos = prototypes_from_embeddings(support.view(), &labels, 5).unwrap();
            for (qi, &pred) in nn.iter().enumerate() {
                let p = classify_embedding(query.row(qi), protos.view(), false).unwrap();
                let am = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(pred, am);
            }
        }
    }

    // ---- disk-backed fixtures for episode-level tests ----

    struct Fixture {
        _dir: tempfile::TempDir,
        index: DatasetIndex,
        cache_root: std::path::PathBuf,
    }

    /// Tiny on-disk dataset: `n_classes` classes of 16x16 images with class-
    /// dependent color, plus a cache of `n_variants` generated stand-ins.
    fn fixture(n_classes: usize, per_class: usize, n_variants: usize) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let cache_root = dir.path().join("cache");
        let mut index = DatasetIndex {
            root: root.clone(),
            classes: Vec::new(),
        };
        for c in 0..n_classes {
            let id = format!("class_{c:02}");
            std::fs::create_dir_all(root.join(&id)).unwrap();
            let mut images = Vec::new();
            for i in 0..per_class {
                let rel = std::path::PathBuf::from(&id).join(format!("img_{i:02}.png"));
                let img = Image::new(Array3::from_shape_fn((3, 16, 16), |(ch, y, x)| {
                    let base = (c as f64 / n_classes as f64) * 2.0 - 1.0;
                    let tex = ((y + x + i + ch) % 5) as f64 * 0.08;
                    (base + tex).clamp(-1.0, 1.0)
                }));
                img.save_png(&root.join(&rel)).unwrap();
                let mut variants = Vec::new();
                for v in 0..n_variants {
                    let vrel = std::path::PathBuf::from(&id).join(format!("img_{i:02}_v{v}.png"));
                    let vimg = Image::new(img.data.mapv(|p| (p * 0.8 + 0.05 * v as f64).clamp(-1.0, 1.0)));
                    std::fs::create_dir_all(cache_root.join(&id)).unwrap();
                    vimg.save_png(&cache_root.join(&vrel)).unwrap();
                    variants.push(vrel);
                }
                images.push(ImageRecord {
                    rel_path: rel,
                    variants,
                    latent: None,
                });
            }
            index.classes.push(crate::data::ClassEntry { id, images });
        }
        Fixture {
            _dir: dir,
            index,
            cache_root,
        }
    }

    /// Like [`fixture`] but with class-independent noise images: labels carry
    /// no pixel signal at all.
    fn noise_fixture(n_classes: usize, per_class: usize) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let cache_root = dir.path().join("cache");
        let mut rng = rng_from_seed(0xfeed);
        let mut index = DatasetIndex {
            root: root.clone(),
            classes: Vec::new(),
        };
        for c in 0..n_classes {
            let id = format!("class_{c:02}");
            std::fs::create_dir_all(root.join(&id)).unwrap();
            let mut images = Vec::new();
            for i in 0..per_class {
                let rel = std::path::PathBuf::from(&id).join(format!("img_{i:02}.png"));
                let img = Image::new(Array3::from_shape_fn((3, 16, 16), |_| {
                    rng.gen_range(-1.0..1.0)
                }));
                img.save_png(&root.join(&rel)).unwrap();
                images.push(ImageRecord {
                    rel_path: rel,
                    variants: Vec::new(),
                    latent: None,
                });
            }
            index.classes.push(crate::data::ClassEntry { id, images });
        }
        Fixture {
            _dir: dir,
            index,
            cache_root,
        }
    }

    #[test]
    fn augmented_support_size_contract() {
        let fx = fixture(5, 4, 3);
        let ep = sample_episode(&fx.index, 5, 1, 2, 3).unwrap();
        let fusion = FusionNet::new(FusionConfig::default(), 0);
        for n_aug in [0, 1, 3] {
            let set = augment_support(&ep, &fx.index, &fx.cache_root, &fusion, n_aug, 9).unwrap();
            assert_eq!(set.len(), 5 * (1 + n_aug));
            for label in 0..5 {
                let real = set
                    .entries
                    .iter()
                    .filter(|e| e.label == label && e.origin == Origin::Real)
                    .count();
                let fused = set
                    .entries
                    .iter()
                    .filter(|e| e.label == label && e.origin == Origin::Fused)
                    .count();
                assert_eq!(real, 1);
                assert_eq!(fused, n_aug);
            }
        }
        // more variants than cached
        assert!(augment_support(&ep, &fx.index, &fx.cache_root, &fusion, 4, 9).is_err());
    }

    #[test]
    fn missing_cache_names_image() {
        let fx = fixture(5, 4, 0);
        let ep = sample_episode(&fx.index, 5, 1, 2, 3).unwrap();
        let fusion = FusionNet::new(FusionConfig::default(), 0);
        let err = augment_support(&ep, &fx.index, &fx.cache_root, &fusion, 1, 9).unwrap_err();
        match err {
            Error::MissingCacheEntry { image } => assert!(image.contains("img_")),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn augmentation_baseline_contracts() {
        let fx = fixture(3, 4, 2);
        let ep = sample_episode(&fx.index, 3, 1, 2, 5).unwrap();
        let backbone = Backbone::new(BackboneConfig::default(), 2);
        for (kind, extra) in [
            (AugmentationKind::None, 0),
            (AugmentationKind::Flip, 1),
            (AugmentationKind::Gaussian, 2),
            (AugmentationKind::Mixup, 2),
            (AugmentationKind::Finetunegan, 2),
        ] {
            let set = augmentation_baseline(
                &ep,
                &fx.index,
                &fx.cache_root,
                kind,
                2,
                backbone.feat_dim(),
                7,
            )
            .unwrap();
            assert_eq!(set.len(), 3 * (1 + extra), "{kind:?}");
            set.embed_all(&backbone).unwrap();
        }
    }

    #[test]
    fn flip_twice_restores_image() {
        let fx = fixture(2, 2, 0);
        let img = fx.index.load_image(&fx.index.classes[0].images[0]).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn episode_loss_runs_and_reaches_only_fusion_and_backbone() {
        let fx = fixture(3, 4, 2);
        let ep = sample_episode(&fx.index, 3, 1, 2, 1).unwrap();
        let prep = prepare_episode(&ep, &fx.index, &fx.cache_root, 1, 4).unwrap();
        let fusion = FusionNet::new(FusionConfig::default(), 5);
        let backbone = Backbone::new(BackboneConfig::default(), 6);
        let generator = crate::generator::Generator::new(
            crate::generator::GeneratorConfig {
                n_classes: 3,
                ..Default::default()
            },
            7,
        );

        let mut t = Tape::new();
        let gtp = generator.ps.inject(&mut t);
        let ftp = fusion.ps.inject(&mut t);
        let btp = backbone.ps.inject(&mut t);
        let out = episode_loss(&mut t, &prep, &fusion, &ftp, &backbone, &btp, false).unwrap();
        let loss = t.scalar(out.loss);
        assert!(loss.is_finite() && loss > 0.0);
        assert!((0.0..=1.0).contains(&out.accuracy));

        let grads = t.backward(out.loss);
        // generator params untouched by construction
        for id in generator.ps.ids() {
            assert!(grads.get(gtp.get(id)).iter().all(|&g| g == 0.0));
        }
        // fusion head and backbone both receive gradient
        let (hw, _) = fusion.head_param_ids();
        assert!(grads.get(ftp.get(hw)).iter().any(|&g| g != 0.0));
        let bid = backbone.ps.trainable_ids()[0];
        assert!(grads.get(btp.get(bid)).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn episode_loss_near_uniform_for_random_backbone() {
        // with class-uninformative inputs the loss should sit near ln(n)
        let fx = noise_fixture(4, 6);
        let fusion = FusionNet::new(FusionConfig::default(), 1);
        let backbone = Backbone::new(BackboneConfig::default(), 2);
        let mut losses = Vec::new();
        for seed in 0..10 {
            let ep = sample_episode(&fx.index, 4, 1, 3, seed).unwrap();
            let prep = prepare_episode(&ep, &fx.index, &fx.cache_root, 0, seed).unwrap();
            let mut t = Tape::new();
            let ftp = fusion.ps.inject(&mut t);
            let btp = backbone.ps.inject(&mut t);
            let out = episode_loss(&mut t, &prep, &fusion, &ftp, &backbone, &btp, false).unwrap();
            losses.push(t.scalar(out.loss));
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        // ln 4 ≈ 1.386; an untrained embedding should sit in its vicinity
        assert!(mean > 0.8 && mean < 2.5, "mean loss {mean}");
    }

    #[test]
    fn episode_loss_gradient_matches_finite_differences() {
        let fx = fixture(2, 3, 1);
        let ep = sample_episode(&fx.index, 2, 1, 1, 2).unwrap();
        let prep = prepare_episode(&ep, &fx.index, &fx.cache_root, 1, 3).unwrap();
        let fusion = FusionNet::new(FusionConfig::default(), 8);
        let mut backbone = Backbone::new(
            BackboneConfig {
                channels: vec![4, 4, 4, 4],
            },
            9,
        );

        let eval = |fus: &FusionNet, bb: &Backbone| -> f64 {
            let mut t = Tape::new();
            let ftp = fus.ps.inject(&mut t);
            let btp = bb.ps.inject(&mut t);
            let out = episode_loss(&mut t, &prep, fus, &ftp, bb, &btp, false).unwrap();
            t.scalar(out.loss)
        };

        let mut t = Tape::new();
        let ftp = fusion.ps.inject(&mut t);
        let btp = backbone.ps.inject(&mut t);
        let out = episode_loss(&mut t, &prep, &fusion, &ftp, &backbone, &btp, false).unwrap();
        let grads = t.backward(out.loss);

        let h = 1e-5;
        // a handful of backbone conv weights
        let bid = backbone.ps.trainable_ids()[0];
        for k in 0..3 {
            let analytic = grads.get(btp.get(bid)).iter().nth(k).copied().unwrap();
            let orig = backbone.ps.value(bid).iter().nth(k).copied().unwrap();
            backbone.ps.value_mut(bid).iter_mut().nth(k).map(|v| *v = orig + h);
            let up = eval(&fusion, &backbone);
            backbone.ps.value_mut(bid).iter_mut().nth(k).map(|v| *v = orig - h);
            let down = eval(&fusion, &backbone);
            backbone.ps.value_mut(bid).iter_mut().nth(k).map(|v| *v = orig);
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-4,
                "backbone grad {k}: analytic {analytic}, numeric {numeric}"
            );
        }
        // a couple of fusion head bias entries
        let mut fusion = fusion;
        let (_, hb) = fusion.head_param_ids();
        for k in 0..2 {
            let mut t2 = Tape::new();
            let ftp2 = fusion.ps.inject(&mut t2);
            let btp2 = backbone.ps.inject(&mut t2);
            let out2 =
                episode_loss(&mut t2, &prep, &fusion, &ftp2, &backbone, &btp2, false).unwrap();
            let grads2 = t2.backward(out2.loss);
            let analytic = grads2.get(ftp2.get(hb)).iter().nth(k).copied().unwrap();
            let orig = fusion.ps.value(hb).iter().nth(k).copied().unwrap();
            fusion.ps.value_mut(hb).iter_mut().nth(k).map(|v| *v = orig + h);
            let up = eval(&fusion, &backbone);
            fusion.ps.value_mut(hb).iter_mut().nth(k).map(|v| *v = orig - h);
            let down = eval(&fusion, &backbone);
            fusion.ps.value_mut(hb).iter_mut().nth(k).map(|v| *v = orig);
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-4,
                "fusion grad {k}: analytic {analytic}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn classify_query_probabilities_sum_to_one() {
        let fx = fixture(3, 3, 1);
        let ep = sample_episode(&fx.index, 3, 1, 1, 0).unwrap();
        let fusion = FusionNet::new(FusionConfig::default(), 0);
        let backbone = Backbone::new(BackboneConfig::default(), 1);
        let set = augment_support(&ep, &fx.index, &fx.cache_root, &fusion, 1, 2).unwrap();
        let protos = compute_prototypes(&set, &backbone).unwrap();
        let q = fx.index.load_image(&ep.query[0].record).unwrap();
        let p = classify_query(&q, &protos, &backbone, false).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.sum() - 1.0).abs() < 1e-6);
    }
}
