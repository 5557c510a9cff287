//! Single-image generator fine-tuning and the generation cache.
//!
//! For one target image, the latent code and the generator's BN scale/shift
//! parameters are optimized to reconstruct the target under an L1 +
//! perceptual + earth-mover objective. All other generator weights stay
//! frozen. Perturbing the tuned latent then yields a set of image variants,
//! which are cached on disk ahead of meta-training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD, IxDyn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentCode};
use crate::image_io::Image;
use crate::nn::{Adam, ParamSet};
use crate::perceptual::PerceptualNet;
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::tape::Tape;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Perceptual-loss weight.
    pub lambda_p: f64,
    /// Earth-mover regularizer weight.
    pub lambda_z: f64,
    pub steps: usize,
    /// Learning rate for the latent code.
    pub lr_z: f64,
    /// Learning rate for BN scale/shift parameters.
    pub lr_bn: f64,
    /// Std of the latent perturbation when emitting variants.
    pub epsilon_scale: f64,
    /// Variants emitted per source image.
    pub n_variants: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lambda_p: 0.1,
            lambda_z: 0.1,
            steps: 500,
            lr_z: 0.01,
            lr_bn: 0.0005,
            epsilon_scale: 0.1,
            n_variants: 10,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_p < 0.0 || self.lambda_z < 0.0 {
            return Err(Error::Precondition("loss weights must be >= 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::Precondition("steps must be >= 1".into()));
        }
        if self.n_variants == 0 {
            return Err(Error::Precondition("n_variants must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss decomposition of one reconstruction evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub em: f64,
}

/// Outcome of adapting the generator to one target image.
#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub tuned_z: LatentCode,
    /// Tuned BN scale/shift values by parameter name.
    pub tuned_bn: Vec<(String, ArrayD<f64>)>,
    pub loss_trace: Vec<LossTerms>,
    pub variants: Vec<Image>,
    /// Set when the loss never dropped below its initial value.
    pub non_decreasing_warning: bool,
}

/// 1-D earth-mover distance between a latent vector and a reference sample:
/// sort both and take the mean absolute difference of sorted entries.
pub fn em_regularizer(z: &Array1<f64>, r: &Array1<f64>) -> Result<f64> {
    if z.len() != r.len() {
        return Err(Error::Shape {
            expected: format!("reference of dimension {}", z.len()),
            got: format!("{}", r.len()),
        });
    }
    let mut zs: Vec<f64> = z.to_vec();
    let mut rs: Vec<f64> = r.to_vec();
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(zs
        .iter()
        .zip(rs.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / z.len() as f64)
}

/// Evaluate the full reconstruction objective for a (generated, target) pair:
/// `total = l1 + lambda_p * perceptual + lambda_z * em(z, r)`.
pub fn reconstruction_loss(
    generated: &Image,
    target: &Image,
    perceptual: &PerceptualNet,
    z: &Array1<f64>,
    r_sample: &Array1<f64>,
    config: &AdaptConfig,
) -> Result<LossTerms> {
    if generated.shape() != target.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", generated.shape()),
            got: format!("{:?}", target.shape()),
        });
    }
    let (c, h, w) = generated.shape();
    let mut t = Tape::new();
    let tp = perceptual.inject(&mut t);
    let g = t.leaf(
        generated
            .data
            .clone()
            .into_shape_with_order(IxDyn(&[1, c, h, w]))
            .unwrap(),
    );
    let tgt = t.leaf(
        target
            .data
            .clone()
            .into_shape_with_order(IxDyn(&[1, c, h, w]))
            .unwrap(),
    );
    let l1_var = t.l1_mean(g, tgt);
    let l1 = t.scalar(l1_var);
    let perc_var = perceptual.distance(&mut t, &tp, g, tgt);
    let perc = t.scalar(perc_var);
    let em = em_regularizer(z, r_sample)?;
    Ok(LossTerms {
        total: l1 + config.lambda_p * perc + config.lambda_z * em,
        l1,
        perceptual: perc,
        em,
    })
}

/// Fine-tune the latent code and BN scale/shift of `generator` to reconstruct
/// `target`. The generator itself is not modified; tuned values are returned.
pub fn adapt(
    generator: &Generator,
    target: &Image,
    perceptual: &PerceptualNet,
    config: &AdaptConfig,
    seed: u64,
) -> Result<AdaptResult> {
    config.validate()?;
    let res = generator.cfg.resolution();
    if target.shape() != (3, res, res) {
        return Err(Error::Shape {
            expected: format!("(3, {res}, {res})"),
            got: format!("{:?}", target.shape()),
        });
    }

    // working copy: only BN scale/shift learnable
    let mut work_gen = Generator::new(generator.cfg.clone(), 0);
    work_gen
        .ps
        .load_blobs(&generator.ps.named_blobs())
        .expect("same architecture");
    let (bn_ids, other_ids) = work_gen.bn_parameter_view();
    for id in &other_ids {
        work_gen.ps.set_trainable(*id, false);
    }

    let mut rng = rng_from_seed(derive_seed(seed, "adapt"));
    let init = LatentCode::sample(&generator.cfg, derive_seed(seed, "adapt-z"));
    let mut latents = ParamSet::new();
    let noise_id = latents.alloc("z.noise", init.noise.clone().into_dyn(), true);
    let embed_id = latents.alloc("z.embed", init.class_embedding.clone().into_dyn(), true);

    let mut opt_gen = Adam::new(&work_gen.ps, config.lr_bn);
    let mut opt_lat = Adam::new(&latents, config.lr_z);

    let (c, h, w) = target.shape();
    let target_arr = target
        .data
        .clone()
        .into_shape_with_order(IxDyn(&[1, c, h, w]))
        .unwrap();

    let dim = generator.cfg.latent_dim();
    let mut trace: Vec<LossTerms> = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        // reference resampled each step; EM pulls z toward a Gaussian
        let r: Array1<f64> =
            Array1::from_iter((0..dim).map(|_| StandardNormal.sample(&mut rng)));

        let mut t = Tape::new();
        let tp_gen = work_gen.ps.inject(&mut t);
        let tp_lat = latents.inject(&mut t);
        let tp_perc = perceptual.inject(&mut t);

        let noise = tp_lat.get(noise_id);
        let embed = tp_lat.get(embed_id);
        let z_vec = t.concat1(&[noise, embed]);
        let z = t.reshape(z_vec, &[1, dim]);
        let (out, _) = work_gen.forward(&mut t, &tp_gen, z);
        let tgt = t.leaf(target_arr.clone());

        let l1 = t.l1_mean(out, tgt);
        let perc = perceptual.distance(&mut t, &tp_perc, out, tgt);
        let em = t.em_sorted(z_vec, &r);
        let perc_w = t.scale(perc, config.lambda_p);
        let em_w = t.scale(em, config.lambda_z);
        let partial = t.add(l1, perc_w);
        let total = t.add(partial, em_w);

        let terms = LossTerms {
            total: t.scalar(total),
            l1: t.scalar(l1),
            perceptual: t.scalar(perc),
            em: t.scalar(em),
        };
        if !terms.total.is_finite() {
            return Err(Error::Adaptation {
                step,
                reason: "loss is not finite".into(),
            });
        }
        trace.push(terms);

        let grads = t.backward(total);
        opt_gen.step(&mut work_gen.ps, &tp_gen, &grads);
        opt_lat.step(&mut latents, &tp_lat, &grads);
    }

    let initial = trace[0].total;
    let best = trace.iter().map(|t| t.total).fold(f64::INFINITY, f64::min);
    let tuned_bn = bn_ids
        .iter()
        .map(|id| {
            (
                work_gen.ps.name(*id).to_string(),
                work_gen.ps.value(*id).clone(),
            )
        })
        .collect();
    Ok(AdaptResult {
        tuned_z: LatentCode {
            noise: latents
                .value(noise_id)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap(),
            class_embedding: latents
                .value(embed_id)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap(),
        },
        tuned_bn,
        loss_trace: trace,
        variants: Vec::new(),
        non_decreasing_warning: best >= initial,
    })
}

/// Apply tuned BN values onto a clone of the generator.
pub fn generator_with_tuned_bn(generator: &Generator, result: &AdaptResult) -> Generator {
    let mut tuned = Generator::new(generator.cfg.clone(), 0);
    tuned
        .ps
        .load_blobs(&generator.ps.named_blobs())
        .expect("same architecture");
    for (name, value) in &result.tuned_bn {
        for id in tuned.ps.ids().collect::<Vec<_>>() {
            if tuned.ps.name(id) == name {
                *tuned.ps.value_mut(id) = value.clone();
            }
        }
    }
    tuned
}

/// Emit image variants by perturbing the tuned latent: variant `k` is
/// `G(z + eps_k)` with `eps_k ~ N(0, epsilon_scale^2)`.
pub fn sample_variants(
    result: &AdaptResult,
    generator: &Generator,
    epsilon_scale: f64,
    n_variants: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    let tuned = generator_with_tuned_bn(generator, result);
    let mut rng = rng_from_seed(derive_seed(seed, "variants"));
    let mut out = Vec::with_capacity(n_variants);
    for _ in 0..n_variants {
        let mut perturb = |v: &Array1<f64>| {
            v.mapv(|x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x + epsilon_scale * e
            })
        };
        let noise = perturb(&result.tuned_z.noise);
        let embed = perturb(&result.tuned_z.class_embedding);
        out.push(tuned.generate(&LatentCode {
            noise,
            class_embedding: embed,
        })?);
    }
    Ok(out)
}

/// Per-source-image cache entry in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub variants: Vec<PathBuf>,
    pub latent: PathBuf,
    pub final_loss: f64,
}

/// Maps source image (path relative to dataset root) to its cached outputs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CacheManifest {
    pub entries: BTreeMap<PathBuf, CacheEntry>,
}

impl CacheManifest {
    pub fn load(cache_root: &Path) -> Result<CacheManifest> {
        let path = cache_root.join("manifest.json");
        if !path.exists() {
            return Ok(CacheManifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad cache manifest {}: {e}", path.display())))
    }

    pub fn save(&self, cache_root: &Path) -> Result<()> {
        std::fs::create_dir_all(cache_root).map_err(|e| Error::io(cache_root, e))?;
        let path = cache_root.join("manifest.json");
        let tmp = cache_root.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Attach cached variant paths onto a dataset index.
    pub fn apply_to_index(&self, index: &mut DatasetIndex) {
        let rels: Vec<PathBuf> = index
            .records()
            .map(|(_, r)| r.rel_path.clone())
            .collect();
        for rel in rels {
            if let Some(entry) = self.entries.get(&rel) {
                index.set_variants(&rel, entry.variants.clone(), entry.latent.clone());
            }
        }
    }

    /// Source rel-paths in `index` that have no cache entry.
    pub fn missing_for(&self, index: &DatasetIndex) -> Vec<PathBuf> {
        index
            .records()
            .filter(|(_, r)| !self.entries.contains_key(&r.rel_path))
            .map(|(_, r)| r.rel_path.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CacheSummary {
    pub completed: usize,
    pub skipped: usize,
    pub failures: Vec<(PathBuf, String)>,
}

/// Adapt the generator to every image of `index` and cache the variants.
/// Idempotent: images already present in the manifest are skipped. Per-image
/// failures are recorded in the summary, not fatal.
pub fn build_generation_cache(
    index: &mut DatasetIndex,
    generator: &Generator,
    perceptual: &PerceptualNet,
    config: &AdaptConfig,
    cache_root: &Path,
    seed: u64,
) -> Result<CacheSummary> {
    config.validate()?;
    let mut manifest = CacheManifest::load(cache_root)?;
    let mut summary = CacheSummary::default();

    let records: Vec<(String, PathBuf)> = index
        .records()
        .map(|(c, r)| (c.to_string(), r.rel_path.clone()))
        .collect();
    for (i, (_class, rel)) in records.iter().enumerate() {
        if manifest.entries.contains_key(rel) {
            summary.skipped += 1;
            continue;
        }
        let image_seed = derive_seed_indexed(seed, "cache-image", i as u64);
        match cache_one(index, generator, perceptual, config, cache_root, rel, image_seed) {
            Ok(entry) => {
                manifest.entries.insert(rel.clone(), entry);
                manifest.save(cache_root)?;
                summary.completed += 1;
            }
            Err(e) => summary.failures.push((rel.clone(), e.to_string())),
        }
    }
    manifest.apply_to_index(index);
    Ok(summary)
}

fn cache_one(
    index: &DatasetIndex,
    generator: &Generator,
    perceptual: &PerceptualNet,
    config: &AdaptConfig,
    cache_root: &Path,
    rel: &Path,
    seed: u64,
) -> Result<CacheEntry> {
    let target = Image::load_png(&index.root.join(rel))?;
    let result = adapt(generator, &target, perceptual, config, seed)?;
    let variants = sample_variants(&result, generator, config.epsilon_scale, config.n_variants, seed)?;

    // unique subdirectory per source image; files written before the manifest
    // records them
    let sub: PathBuf = rel.with_extension("");
    let dir = cache_root.join(&sub);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut variant_paths = Vec::with_capacity(variants.len());
    for (k, v) in variants.iter().enumerate() {
        let p = sub.join(format!("variant_{k:02}.png"));
        v.save_png(&cache_root.join(&p))?;
        variant_paths.push(p);
    }

    let latent_rel = sub.join("latent.mirc");
    let mut blobs: Vec<(String, ArrayD<f64>)> = vec![
        ("z.noise".into(), result.tuned_z.noise.clone().into_dyn()),
        ("z.embed".into(), result.tuned_z.class_embedding.clone().into_dyn()),
    ];
    for (name, value) in &result.tuned_bn {
        blobs.push((name.clone(), value.clone()));
    }
    crate::checkpoint::write_checkpoint(
        &cache_root.join(&latent_rel),
        &serde_json::json!({"kind": "adapted-latent", "source": rel}),
        &blobs,
    )?;

    let trace_rel = sub.join("loss_trace.json");
    std::fs::write(
        cache_root.join(&trace_rel),
        serde_json::to_string(&result.loss_trace).expect("trace serializes"),
    )
    .map_err(|e| Error::io(cache_root.join(&trace_rel), e))?;

    Ok(CacheEntry {
        variants: variant_paths,
        latent: latent_rel,
        final_loss: result.loss_trace.last().map(|t| t.total).unwrap_or(f64::NAN),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::perceptual::PerceptualConfig;
    use ndarray::arr1;

    fn mini_gen() -> Generator {
        Generator::new(
            GeneratorConfig {
                z_dim: 4,
                embed_dim: 2,
                stem_channels: 6,
                channels: vec![5, 4],
                n_classes: 2,
            },
            1,
        )
    }

    fn mini_perc() -> PerceptualNet {
        PerceptualNet::new(PerceptualConfig {
            channels: vec![4],
            seed: 3,
        })
    }

    #[test]
    fn em_basic_identities() {
        let r = arr1(&[0.5, -0.5, 1.5]);
        assert_eq!(em_regularizer(&r, &r).unwrap(), 0.0);
        let shifted = r.mapv(|v| v + 0.7);
        assert!((em_regularizer(&shifted, &r).unwrap() - 0.7).abs() < 1e-12);
        // permutation invariance
        let perm = arr1(&[1.5, 0.5, -0.5]);
        assert_eq!(em_regularizer(&perm, &r).unwrap(), 0.0);
        // dimension mismatch
        assert!(em_regularizer(&arr1(&[1.0]), &r).is_err());
    }

    #[test]
    fn em_is_nonnegative_on_random_inputs() {
        let mut rng = rng_from_seed(0);
        for _ in 0..200 {
            let z = Array1::from_iter((0..8).map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            }));
            let r = Array1::from_iter((0..8).map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            }));
            assert!(em_regularizer(&z, &r).unwrap() >= 0.0);
        }
    }

    #[test]
    fn reconstruction_loss_decomposes() {
        let perc = mini_perc();
        let cfg = AdaptConfig::default();
        let mut a = Image::zeros(3, 8, 8);
        a.data[[0, 1, 1]] = 0.6;
        let b = Image::zeros(3, 8, 8);
        let z = arr1(&[0.1, 0.2]);
        let r = arr1(&[0.0, 0.0]);
        let terms = reconstruction_loss(&a, &b, &perc, &z, &r, &cfg).unwrap();
        let expect = terms.l1 + cfg.lambda_p * terms.perceptual + cfg.lambda_z * terms.em;
        assert!((terms.total - expect).abs() < 1e-12);
        assert!(terms.l1 >= 0.0 && terms.perceptual >= 0.0 && terms.em >= 0.0);

        // identical images and matched latent: l1 and perceptual vanish
        let same = reconstruction_loss(&b, &b, &perc, &r, &r, &cfg).unwrap();
        assert_eq!(same.l1, 0.0);
        assert_eq!(same.perceptual, 0.0);
        assert_eq!(same.em, 0.0);

        // zero weights: total reduces to l1 exactly
        let cfg0 = AdaptConfig {
            lambda_p: 0.0,
            lambda_z: 0.0,
            ..Default::default()
        };
        let t0 = reconstruction_loss(&a, &b, &perc, &z, &r, &cfg0).unwrap();
        assert_eq!(t0.total, t0.l1);
    }

    #[test]
    fn l1_hand_case() {
        // ((0,0),(1,1)) vs ((1,1),(1,1)) single channel -> mean |diff| = 0.5
        let perc = mini_perc();
        let mut a = Image::zeros(3, 2, 2);
        a.data[[0, 1, 0]] = 1.0;
        a.data[[0, 1, 1]] = 1.0;
        let mut b = Image::zeros(3, 2, 2);
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            b.data[[0, y, x]] = 1.0;
        }
        // restrict to the single channel convention by zeroing other channels
        let cfg = AdaptConfig {
            lambda_p: 0.0,
            lambda_z: 0.0,
            ..Default::default()
        };
        let z = arr1(&[0.0]);
        let terms = reconstruction_loss(&a, &b, &perc, &z, &z, &cfg).unwrap();
        // channel 0 contributes |0-1| + |0-1| over 12 scalars total
        assert!((terms.l1 - 2.0 / 12.0).abs() < 1e-12);
        // the documented mean-absolute convention on just that channel:
        let a1 = Image::new(a.data.slice(ndarray::s![0..1, .., ..]).to_owned());
        let b1 = Image::new(b.data.slice(ndarray::s![0..1, .., ..]).to_owned());
        assert!((a1.mean_abs_diff(&b1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adapt_rejects_zero_steps_and_bad_shapes() {
        let gen = mini_gen();
        let perc = mini_perc();
        let target = Image::zeros(3, 16, 16);
        let cfg = AdaptConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(matches!(
            adapt(&gen, &target, &perc, &cfg, 0),
            Err(Error::Precondition(_))
        ));
        let cfg = AdaptConfig {
            steps: 5,
            ..Default::default()
        };
        let wrong = Image::zeros(3, 8, 8);
        assert!(matches!(
            adapt(&gen, &wrong, &perc, &cfg, 0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn adapt_freezes_non_bn_params_and_reduces_loss() {
        let gen = mini_gen();
        let perc = mini_perc();
        let z = LatentCode::sample(&gen.cfg, 77);
        let target = gen.generate(&z).unwrap();
        let cfg = AdaptConfig {
            steps: 60,
            ..Default::default()
        };
        let (_bn_ids, other_ids) = gen.bn_parameter_view();
        let before = gen.ps.serialize_subset(&other_ids);
        let result = adapt(&gen, &target, &perc, &cfg, 5).unwrap();
        let after = gen.ps.serialize_subset(&other_ids);
        assert_eq!(before, after, "non-BN params must be untouched");
        assert_eq!(result.loss_trace.len(), 60);
        assert!(result.loss_trace.last().unwrap().total < result.loss_trace[0].total);
        assert!(!result.non_decreasing_warning);

        // determinism
        let again = adapt(&gen, &target, &perc, &cfg, 5).unwrap();
        let t1: Vec<f64> = result.loss_trace.iter().map(|t| t.total).collect();
        let t2: Vec<f64> = again.loss_trace.iter().map(|t| t.total).collect();
        assert_eq!(t1, t2);
    }

    #[test]
    fn variants_with_zero_epsilon_equal_reconstruction() {
        let gen = mini_gen();
        let perc = mini_perc();
        let z = LatentCode::sample(&gen.cfg, 13);
        let target = gen.generate(&z).unwrap();
        let cfg = AdaptConfig {
            steps: 10,
            ..Default::default()
        };
        let result = adapt(&gen, &target, &perc, &cfg, 5).unwrap();
        let variants = sample_variants(&result, &gen, 0.0, 4, 1).unwrap();
        assert_eq!(variants.len(), 4);
        let tuned = generator_with_tuned_bn(&gen, &result);
        let recon = tuned.generate(&result.tuned_z).unwrap();
        for v in &variants {
            assert_eq!(v, &recon);
        }
    }

    #[test]
    fn variant_spread_grows_with_epsilon() {
        let gen = mini_gen();
        let perc = mini_perc();
        let z = LatentCode::sample(&gen.cfg, 21);
        let target = gen.generate(&z).unwrap();
        let cfg = AdaptConfig {
            steps: 10,
            ..Default::default()
        };
        let result = adapt(&gen, &target, &perc, &cfg, 2).unwrap();
        let spread = |eps: f64| {
            let vs = sample_variants(&result, &gen, eps, 4, 9).unwrap();
            let mut total = 0.0;
            let mut count = 0;
            for i in 0..vs.len() {
                for j in i + 1..vs.len() {
                    total += vs[i].mean_abs_diff(&vs[j]);
                    count += 1;
                }
            }
            total / count as f64
        };
        let (s1, s2, s3) = (spread(0.01), spread(0.1), spread(0.5));
        assert!(s1 < s2 && s2 < s3, "spread {s1} {s2} {s3} not monotone");
    }
}
