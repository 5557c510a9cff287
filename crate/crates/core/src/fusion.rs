//! Image fusion: predict a grid of mixing weights from an (original,
//! generated) pair and blend the two images cell by cell.
//!
//! The fused image is `w ⊙ original + (1 - w) ⊙ generated` with `w` a
//! per-cell weight in `[0, 1]` expanded to image size with constant blocks.
//! Two separate feature extractors (one per input) feed a fully-connected
//! head that emits one logit per cell; logistic squashing bounds the weights.

use ndarray::{Array2, Array3, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::nn::{Conv2d, Linear, ParamSet, TapedParams};
use crate::rng::rng_from_seed;
use crate::tape::{block_index, Tape, Var};

/// Grid of mixing coefficients, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub grid: Array2<f64>,
}

impl FusionWeights {
    pub fn new(grid: Array2<f64>) -> Result<Self> {
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition("fusion weights must lie in [0,1]".into()));
        }
        Ok(FusionWeights { grid })
    }

    pub fn uniform(grid_size: usize, value: f64) -> Result<Self> {
        FusionWeights::new(Array2::from_elem((grid_size, grid_size), value))
    }
}

/// Expand a weight grid to an `[h, w]` map of constant rectangular blocks.
/// Axis partition is near-equal with the remainder in the last block.
pub fn upsample_grid(w: &FusionWeights, h: usize, wd: usize) -> Array2<f64> {
    let (gh, gw) = (w.grid.nrows(), w.grid.ncols());
    Array2::from_shape_fn((h, wd), |(y, x)| {
        w.grid[[block_index(y, h, gh), block_index(x, wd, gw)]]
    })
}

/// Blend `original` and `generated` with the expanded weight map:
/// a per-pixel convex combination of the two inputs.
pub fn fuse(original: &Image, generated: &Image, w: &FusionWeights) -> Result<Image> {
    if original.shape() != generated.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", original.shape()),
            got: format!("{:?}", generated.shape()),
        });
    }
    let (c, h, wd) = original.shape();
    let map = upsample_grid(w, h, wd);
    let mut out = Array3::<f64>::zeros((c, h, wd));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..wd {
                let m = map[[y, x]];
                out[[ci, y, x]] =
                    m * original.data[[ci, y, x]] + (1.0 - m) * generated.data[[ci, y, x]];
            }
        }
    }
    Ok(Image::new(out))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FusionConfig {
    /// Cells per axis (the paper's grid is 3x3).
    pub grid_size: usize,
    /// Channels of each conv block in the two feature extractors.
    pub channels: Vec<usize>,
    /// Initial bias on the head logits. Positive values start the fused
    /// output close to the original image.
    pub initial_bias: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            grid_size: 3,
            channels: vec![12, 24],
            initial_bias: 1.0,
        }
    }
}

struct Extractor {
    convs: Vec<Conv2d>,
}

impl Extractor {
    fn new(ps: &mut ParamSet, name: &str, channels: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let mut ci = 3;
        for (i, &co) in channels.iter().enumerate() {
            convs.push(Conv2d::new(ps, &format!("{name}.conv{i}"), ci, co, rng));
            ci = co;
        }
        Extractor { convs }
    }

    /// conv + relu + maxpool per block, then global average pool -> [n, feat]
    fn forward(&self, t: &mut Tape, tp: &TapedParams, x: Var) -> Var {
        let mut cur = x;
        for conv in &self.convs {
            cur = conv.forward(t, tp, cur);
            cur = t.relu(cur);
            cur = t.max_pool2(cur);
        }
        t.global_avg_pool(cur)
    }
}

/// The fusion network F: two per-input CNN extractors and a head mapping the
/// concatenated features to one logit per grid cell.
pub struct FusionNet {
    pub cfg: FusionConfig,
    pub ps: ParamSet,
    extractor_orig: Extractor,
    extractor_gen: Extractor,
    head: Linear,
}

impl FusionNet {
    pub fn new(cfg: FusionConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut ps = ParamSet::new();
        let extractor_orig = Extractor::new(&mut ps, "fusion.orig", &cfg.channels, &mut rng);
        let extractor_gen = Extractor::new(&mut ps, "fusion.gen", &cfg.channels, &mut rng);
        let feat = *cfg.channels.last().expect("at least one conv block");
        let head = Linear::new(
            &mut ps,
            "fusion.head",
            feat * 2,
            cfg.grid_size * cfg.grid_size,
            &mut rng,
        );
        {
            let b = ps.value_mut(head.b);
            b.fill(cfg.initial_bias);
        }
        FusionNet {
            cfg,
            ps,
            extractor_orig,
            extractor_gen,
            head,
        }
    }

    /// Ids of the head parameters (for targeted gradient checks).
    pub fn head_param_ids(&self) -> (crate::nn::ParamId, crate::nn::ParamId) {
        (self.head.w, self.head.b)
    }

    /// Tape forward: weight grid `[g, g]` with entries in (0, 1).
    pub fn forward_weights(
        &self,
        t: &mut Tape,
        tp: &TapedParams,
        original: &Image,
        generated: &Image,
    ) -> Result<Var> {
        if original.shape() != generated.shape() {
            return Err(Error::Shape {
                expected: format!("{:?}", original.shape()),
                got: format!("{:?}", generated.shape()),
            });
        }
        let (c, h, w) = original.shape();
        let xo = t.leaf(
            original
                .data
                .clone()
                .into_shape_with_order(ndarray::IxDyn(&[1, c, h, w]))
                .unwrap(),
        );
        let xg = t.leaf(
            generated
                .data
                .clone()
                .into_shape_with_order(ndarray::IxDyn(&[1, c, h, w]))
                .unwrap(),
        );
        let fo = self.extractor_orig.forward(t, tp, xo);
        let fg = self.extractor_gen.forward(t, tp, xg);
        let fo1 = t.reshape(fo, &[self.cfg.channels.last().copied().unwrap()]);
        let fg1 = t.reshape(fg, &[self.cfg.channels.last().copied().unwrap()]);
        let cat = t.concat1(&[fo1, fg1]);
        let g = self.cfg.grid_size;
        let cat2 = t.reshape(cat, &[1, 2 * self.cfg.channels.last().copied().unwrap()]);
        let logits = self.head.forward(t, tp, cat2);
        let squashed = t.sigmoid(logits);
        Ok(t.reshape(squashed, &[g, g]))
    }

    /// Tape forward of the fused image for one (original, generated) pair.
    pub fn forward_fused(
        &self,
        t: &mut Tape,
        tp: &TapedParams,
        original: &Image,
        generated: &Image,
    ) -> Result<Var> {
        let w = self.forward_weights(t, tp, original, generated)?;
        let (_, h, wd) = original.shape();
        let map = t.upsample_grid(w, h, wd);
        Ok(t.blend(map, &original.data, &generated.data))
    }

    /// Inference: predict the mixing weights for a pair of images.
    pub fn predict_weights(&self, original: &Image, generated: &Image) -> Result<FusionWeights> {
        let mut t = Tape::new();
        let tp = self.ps.inject(&mut t);
        let w = self.forward_weights(&mut t, &tp, original, generated)?;
        let grid = t.value(w).clone().into_dimensionality::<Ix2>().unwrap();
        FusionWeights::new(grid)
    }

    /// Inference: predict weights and fuse in one step.
    pub fn fuse_pair(&self, original: &Image, generated: &Image) -> Result<Image> {
        let w = self.predict_weights(original, generated)?;
        fuse(original, generated, &w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn test_image(seed: u64, res: usize) -> Image {
        let mut rng = rng_from_seed(seed);
        Image::new(Array3::from_shape_fn((3, res, res), |_| {
            rand::Rng::gen_range(&mut rng, -1.0..1.0)
        }))
    }

    #[test]
    fn weights_out_of_range_rejected() {
        assert!(FusionWeights::new(arr2(&[[1.2]])).is_err());
        assert!(FusionWeights::new(arr2(&[[-0.1]])).is_err());
        assert!(FusionWeights::uniform(3, 0.5).is_ok());
    }

    #[test]
    fn upsample_grid_all_ones_6x6() {
        let w = FusionWeights::uniform(3, 1.0).unwrap();
        let map = upsample_grid(&w, 6, 6);
        assert!(map.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn upsample_grid_corner_block_9x9() {
        let mut grid = Array2::zeros((3, 3));
        grid[[0, 0]] = 1.0;
        let w = FusionWeights::new(grid).unwrap();
        let map = upsample_grid(&w, 9, 9);
        for y in 0..9 {
            for x in 0..9 {
                let expect = if y < 3 && x < 3 { 1.0 } else { 0.0 };
                assert_eq!(map[[y, x]], expect);
            }
        }
    }

    #[test]
    fn upsample_grid_64_has_nine_constant_blocks() {
        let grid = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 / 10.0);
        let w = FusionWeights::new(grid.clone()).unwrap();
        let map = upsample_grid(&w, 64, 64);
        // enumerate pixels: each must equal its block's grid entry
        let edges = [0usize, 21, 42, 64];
        for bi in 0..3 {
            for bj in 0..3 {
                for y in edges[bi]..edges[bi + 1] {
                    for x in edges[bj]..edges[bj + 1] {
                        assert_eq!(map[[y, x]], grid[[bi, bj]]);
                    }
                }
            }
        }
        let distinct: std::collections::BTreeSet<u64> =
            map.iter().map(|v| v.to_bits()).collect();
        assert_eq!(distinct.len(), 9);
    }

    #[test]
    fn fuse_endpoints() {
        let a = test_image(1, 12);
        let b = test_image(2, 12);
        let ones = FusionWeights::uniform(3, 1.0).unwrap();
        let zeros = FusionWeights::uniform(3, 0.0).unwrap();
        assert_eq!(fuse(&a, &b, &ones).unwrap(), a);
        assert_eq!(fuse(&a, &b, &zeros).unwrap(), b);
    }

    #[test]
    fn fuse_shape_mismatch() {
        let a = test_image(1, 12);
        let b = test_image(2, 16);
        let w = FusionWeights::uniform(3, 0.5).unwrap();
        assert!(matches!(fuse(&a, &b, &w), Err(Error::Shape { .. })));
    }

    #[test]
    fn predict_weights_contract() {
        let net = FusionNet::new(FusionConfig::default(), 0);
        let a = test_image(3, 16);
        let b = test_image(4, 16);
        let w = net.predict_weights(&a, &b).unwrap();
        assert_eq!(w.grid.dim(), (3, 3));
        assert!(w.grid.iter().all(|v| (0.0..=1.0).contains(v)));
        // deterministic
        assert_eq!(net.predict_weights(&a, &b).unwrap(), w);
        // swapped inputs still valid (no symmetry guarantee)
        net.predict_weights(&b, &a).unwrap();
        // resolution mismatch
        let c = test_image(5, 12);
        assert!(net.predict_weights(&a, &c).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn self_fusion_is_identity(seed in 0u64..1000) {
            let img = test_image(seed, 8);
            let mut rng = rng_from_seed(seed ^ 0xabcd);
            let grid = Array2::from_shape_fn((3, 3), |_| rand::Rng::gen_range(&mut rng, 0.0..=1.0));
            let w = FusionWeights::new(grid).unwrap();
            let fused = fuse(&img, &img, &w).unwrap();
            prop_assert!(fused.mean_abs_diff(&img) < 1e-12);
        }

        #[test]
        fn fused_pixels_stay_between_inputs(sa in 0u64..500, sb in 500u64..1000) {
            let a = test_image(sa, 8);
            let b = test_image(sb, 8);
            let mut rng = rng_from_seed(sa ^ sb);
            let grid = Array2::from_shape_fn((3, 3), |_| rand::Rng::gen_range(&mut rng, 0.0..=1.0));
            let w = FusionWeights::new(grid).unwrap();
            let fused = fuse(&a, &b, &w).unwrap();
            for ((x, y), z) in a.data.iter().zip(b.data.iter()).zip(fused.data.iter()) {
                prop_assert!(*z >= x.min(*y) - 1e-12 && *z <= x.max(*y) + 1e-12);
            }
        }
    }
}
