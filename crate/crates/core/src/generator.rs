//! Class-conditional convolutional image generator with explicit access to
//! the batch-normalization scale/shift parameters.
//!
//! The architecture is a small upsampling CNN: a linear stem to a 4x4 feature
//! map, then one (upsample, conv, BN, ReLU) block per entry of `channels`,
//! then a conv to RGB with tanh. Output resolution is `4 * 2^len(channels)`.
//! BN normalization always uses the stored running statistics, so inference
//! is a pure function of (parameters, latent).

use std::path::Path;

use ndarray::{Array1, Array4, ArrayD, Ix4, IxDyn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::nn::{Adam, BatchNorm2d, Conv2d, Linear, ParamId, ParamSet, TapedParams, BN_SCALE_SUFFIX, BN_SHIFT_SUFFIX};
use crate::perceptual::PerceptualNet;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub embed_dim: usize,
    /// Channels of the 4x4 stem feature map.
    pub stem_channels: usize,
    /// Output channels of each upsampling block; each block doubles resolution.
    pub channels: Vec<usize>,
    /// Rows of the class-embedding table (base-split class count).
    pub n_classes: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            z_dim: 16,
            embed_dim: 8,
            stem_channels: 64,
            channels: vec![64, 32, 16],
            n_classes: 20,
        }
    }
}

impl GeneratorConfig {
    pub fn resolution(&self) -> usize {
        4 << self.channels.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.z_dim + self.embed_dim
    }
}

/// Generator input: a noise vector plus a class-embedding segment, optimized
/// jointly during adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub noise: Array1<f64>,
    pub class_embedding: Array1<f64>,
}

impl LatentCode {
    pub fn sample(cfg: &GeneratorConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let normal = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            Array1::from_iter((0..n).map(|_| StandardNormal.sample(rng)))
        };
        LatentCode {
            noise: normal(&mut rng, cfg.z_dim),
            class_embedding: normal(&mut rng, cfg.embed_dim),
        }
    }

    pub fn total_dim(&self) -> usize {
        self.noise.len() + self.class_embedding.len()
    }

    pub fn is_finite(&self) -> bool {
        self.noise.iter().chain(self.class_embedding.iter()).all(|v| v.is_finite())
    }

    pub fn concatenated(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.total_dim());
        out.slice_mut(ndarray::s![..self.noise.len()]).assign(&self.noise);
        out.slice_mut(ndarray::s![self.noise.len()..]).assign(&self.class_embedding);
        out
    }
}

struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
}

pub struct Generator {
    pub cfg: GeneratorConfig,
    pub ps: ParamSet,
    stem: Linear,
    blocks: Vec<Block>,
    out_conv: Conv2d,
    /// Class-embedding table `[n_classes, embed_dim]`, used during
    /// pretraining; adaptation optimizes a free embedding vector instead.
    pub embed_table: ParamId,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut ps = ParamSet::new();
        let stem = Linear::new(
            &mut ps,
            "stem",
            cfg.latent_dim(),
            cfg.stem_channels * 16,
            &mut rng,
        );
        let mut blocks = Vec::new();
        let mut ci = cfg.stem_channels;
        for (i, &co) in cfg.channels.iter().enumerate() {
            let conv = Conv2d::new(&mut ps, &format!("block{i}"), ci, co, &mut rng);
            let bn = BatchNorm2d::new(&mut ps, &format!("block{i}"), co);
            blocks.push(Block { conv, bn });
            ci = co;
        }
        let out_conv = Conv2d::new(&mut ps, "to_rgb", ci, 3, &mut rng);
        let embed_table = {
            let mut init = ArrayD::zeros(IxDyn(&[cfg.n_classes, cfg.embed_dim]));
            for v in init.iter_mut() {
                *v = { let s: f64 = StandardNormal.sample(&mut rng); s * 0.5 };
            }
            ps.alloc("embed.table", init, true)
        };
        Generator {
            cfg,
            ps,
            stem,
            blocks,
            out_conv,
            embed_table,
        }
    }

    /// Tape forward pass. `z` must be `[b, z_dim + embed_dim]`. Returns the
    /// image batch `[b, 3, H, W]` and the pre-normalization conv outputs
    /// (for running-statistics updates during pretraining).
    pub fn forward(&self, t: &mut Tape, tp: &TapedParams, z: Var) -> (Var, Vec<Var>) {
        let b = t.value(z).shape()[0];
        assert_eq!(t.value(z).shape()[1], self.cfg.latent_dim(), "latent dim mismatch");
        let x = self.stem.forward(t, tp, z);
        let mut cur = t.reshape(x, &[b, self.cfg.stem_channels, 4, 4]);
        cur = t.relu(cur);
        let mut conv_outs = Vec::new();
        for block in &self.blocks {
            cur = t.upsample2(cur);
            cur = block.conv.forward(t, tp, cur);
            conv_outs.push(cur);
            cur = block.bn.forward(t, tp, &self.ps, cur);
            cur = t.relu(cur);
        }
        let rgb = self.out_conv.forward(t, tp, cur);
        (t.tanh(rgb), conv_outs)
    }

    /// Inference: synthesize one image from a latent code.
    pub fn generate(&self, z: &LatentCode) -> Result<Image> {
        if z.noise.len() != self.cfg.z_dim || z.class_embedding.len() != self.cfg.embed_dim {
            return Err(Error::Shape {
                expected: format!("latent ({}, {})", self.cfg.z_dim, self.cfg.embed_dim),
                got: format!("({}, {})", z.noise.len(), z.class_embedding.len()),
            });
        }
        if !z.is_finite() {
            return Err(Error::Precondition("latent code has non-finite entries".into()));
        }
        let mut t = Tape::new();
        let tp = self.ps.inject(&mut t);
        let zv = t.leaf(
            z.concatenated()
                .into_shape_with_order((1, self.cfg.latent_dim()))
                .unwrap()
                .into_dyn(),
        );
        let (out, _) = self.forward(&mut t, &tp, zv);
        let img4 = t.value(out).clone().into_dimensionality::<Ix4>().unwrap();
        Ok(Image::new(img4.index_axis(ndarray::Axis(0), 0).to_owned()))
    }

    /// Parameter ids of every BN scale/shift, and of everything else.
    /// The two sets partition the parameter set exactly.
    pub fn bn_parameter_view(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        let mut bn = Vec::new();
        let mut other = Vec::new();
        for id in self.ps.ids() {
            let name = self.ps.name(id);
            if name.ends_with(BN_SCALE_SUFFIX) || name.ends_with(BN_SHIFT_SUFFIX) {
                bn.push(id);
            } else {
                other.push(id);
            }
        }
        (bn, other)
    }

    pub fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({
            "arch": "toy-conditional-generator",
            "config": self.cfg,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_checkpoint(path, &self.descriptor(), &self.ps.named_blobs())
    }

    pub fn load(path: &Path) -> Result<Generator> {
        let (desc, blobs) = crate::checkpoint::read_checkpoint(path)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if desc.get("arch").and_then(|a| a.as_str()) != Some("toy-conditional-generator") {
            return Err(bad("descriptor is not a generator checkpoint".into()));
        }
        let cfg: GeneratorConfig = serde_json::from_value(desc["config"].clone())
            .map_err(|e| bad(format!("bad config descriptor: {e}")))?;
        let mut gen = Generator::new(cfg, 0);
        gen.ps.load_blobs(&blobs).map_err(bad)?;
        Ok(gen)
    }

    /// Load and require a specific architecture.
    pub fn load_expecting(path: &Path, cfg: &GeneratorConfig) -> Result<Generator> {
        let gen = Generator::load(path)?;
        if &gen.cfg != cfg {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "architecture mismatch: checkpoint {:?}, expected {:?}",
                    gen.cfg, cfg
                ),
            });
        }
        Ok(gen)
    }

    fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        self.blocks.iter().map(|b| &b.bn).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_latent: f64,
    /// Perceptual-loss weight during pretraining.
    pub lambda_p: f64,
    /// Images per class entered into the latent table.
    pub images_per_class: usize,
    /// EMA momentum for BN running statistics.
    pub stat_momentum: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 400,
            batch_size: 8,
            lr: 0.003,
            lr_latent: 0.01,
            lambda_p: 0.1,
            images_per_class: 6,
            stat_momentum: 0.05,
        }
    }
}

/// Outcome of pretraining: the generator plus its training curve.
pub struct PretrainResult {
    pub generator: Generator,
    pub loss_curve: Vec<f64>,
}

/// Train the toy generator from scratch on the base split by jointly
/// optimizing generator weights, per-image latents, and per-class embeddings
/// to reconstruct training images (no discriminator).
pub fn pretrain_toy_generator(
    index: &DatasetIndex,
    gen_cfg: GeneratorConfig,
    cfg: &PretrainConfig,
    perceptual: &PerceptualNet,
    seed: u64,
) -> Result<PretrainResult> {
    let mut gen_cfg = gen_cfg;
    gen_cfg.n_classes = index.classes.len();
    let gen = Generator::new(gen_cfg, derive_seed(seed, "gen-init"));
    let res = gen.cfg.resolution();

    // deterministic image subset: the first images_per_class of each class
    let mut targets: Vec<(usize, Array4<f64>)> = Vec::new(); // (class index, image [1,3,h,w])
    for (ci, class) in index.classes.iter().enumerate() {
        for rec in class.images.iter().take(cfg.images_per_class) {
            let img = index.load_image(rec)?;
            if img.shape() != (3, res, res) {
                return Err(Error::Shape {
                    expected: format!("(3, {res}, {res})"),
                    got: format!("{:?}", img.shape()),
                });
            }
            let arr = img
                .data
                .into_shape_with_order((1, 3, res, res))
                .unwrap();
            targets.push((ci, arr));
        }
    }
    if targets.is_empty() {
        return Err(Error::Precondition("no base-split images available".into()));
    }
    pretrain_on_targets(gen, &targets, cfg, perceptual, seed)
}

fn pretrain_on_targets(
    mut gen: Generator,
    targets: &[(usize, Array4<f64>)],
    cfg: &PretrainConfig,
    perceptual: &PerceptualNet,
    seed: u64,
) -> Result<PretrainResult> {
    let mut rng = rng_from_seed(derive_seed(seed, "pretrain"));
    let zdim = gen.cfg.z_dim;

    // per-image noise latents
    let mut latents = ParamSet::new();
    let latent_init = ArrayD::from_shape_fn(IxDyn(&[targets.len(), zdim]), |_| {
        let s: f64 = StandardNormal.sample(&mut rng);
        s
    });
    let latent_table = latents.alloc("latents", latent_init, true);

    let mut opt_gen = Adam::new(&gen.ps, cfg.lr);
    opt_gen.set_lr_for(&[gen.embed_table], cfg.lr_latent);
    let mut opt_lat = Adam::new(&latents, cfg.lr_latent);

    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rand::Rng::gen_range(&mut rng, 0..targets.len()))
            .collect();

        let mut t = Tape::new();
        let tp_gen = gen.ps.inject(&mut t);
        let tp_lat = latents.inject(&mut t);
        let tp_perc = perceptual.inject(&mut t);

        let mut zs = Vec::with_capacity(batch.len());
        for &bi in &batch {
            let noise = t.row(tp_lat.get(latent_table), bi);
            let embed = t.row(tp_gen.get(gen.embed_table), targets[bi].0);
            zs.push(t.concat1(&[noise, embed]));
        }
        let z = t.stack(&zs);
        let (out, conv_outs) = gen.forward(&mut t, &tp_gen, z);

        let res = gen.cfg.resolution();
        let mut target_batch = Array4::<f64>::zeros((batch.len(), 3, res, res));
        for (k, &bi) in batch.iter().enumerate() {
            target_batch
                .index_axis_mut(ndarray::Axis(0), k)
                .assign(&targets[bi].1.index_axis(ndarray::Axis(0), 0));
        }
        let target = t.leaf(target_batch.into_dyn());
        let l1 = t.l1_mean(out, target);
        let perc = perceptual.distance(&mut t, &tp_perc, out, target);
        let perc_w = t.scale(perc, cfg.lambda_p);
        let loss = t.add(l1, perc_w);

        let loss_val = t.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::Divergence { step });
        }
        loss_curve.push(loss_val);

        let grads = t.backward(loss);
        // refresh running stats from this batch before the weights move
        let bns: Vec<BatchNorm2d> = gen.bn_layers().into_iter().cloned().collect();
        let stats: Vec<Array4<f64>> = conv_outs
            .iter()
            .map(|v| t.value(*v).clone().into_dimensionality::<Ix4>().unwrap())
            .collect();
        for (bn, act) in bns.iter().zip(stats.iter()) {
            bn.update_stats(&mut gen.ps, act, cfg.stat_momentum);
        }
        opt_gen.step(&mut gen.ps, &tp_gen, &grads);
        opt_lat.step(&mut latents, &tp_lat, &grads);
    }

    Ok(PretrainResult {
        generator: gen,
        loss_curve,
    })
}
