//! Synthetic shapes-and-textures dataset.
//!
//! Each class is a (shape, foreground color, background style) combination;
//! images within a class jitter position, scale, colors, and pixel noise.
//! Used for the smoke benchmark and as a stand-in for real bird datasets.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::rng::{rng_from_seed, derive_seed_indexed};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub base_classes: usize,
    pub val_classes: usize,
    pub novel_classes: usize,
    pub images_per_class: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base_classes: 20,
            val_classes: 6,
            novel_classes: 10,
            images_per_class: 30,
            resolution: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

const SHAPES: [Shape; 6] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
];

#[derive(Debug, Clone, Copy)]
enum Background {
    Solid,
    HStripes,
    VStripes,
    Dots,
    DiagStripes,
    Checker,
}

const BACKGROUNDS: [Background; 6] = [
    Background::Solid,
    Background::HStripes,
    Background::VStripes,
    Background::Dots,
    Background::DiagStripes,
    Background::Checker,
];

// values in [-1, 1]
const FG_COLORS: [[f64; 3]; 6] = [
    [0.9, -0.6, -0.6],
    [-0.6, 0.9, -0.6],
    [-0.6, -0.6, 0.9],
    [0.9, 0.9, -0.7],
    [0.9, -0.5, 0.9],
    [-0.5, 0.9, 0.9],
];

const BG_COLORS: [[f64; 3]; 6] = [
    [-0.8, -0.8, -0.8],
    [0.4, 0.4, 0.4],
    [-0.2, 0.1, -0.5],
    [0.3, -0.3, 0.1],
    [-0.5, -0.1, 0.4],
    [0.1, 0.3, -0.2],
];

struct ClassStyle {
    shape: Shape,
    fg: [f64; 3],
    bg_style: Background,
    bg: [f64; 3],
}

fn class_style(class_index: usize) -> ClassStyle {
    // walk the product space with coprime strides so neighbouring classes
    // differ in more than one attribute
    ClassStyle {
        shape: SHAPES[class_index % 6],
        fg: FG_COLORS[(class_index * 5 + class_index / 6) % 6],
        bg_style: BACKGROUNDS[(class_index / 6 + class_index) % 6],
        bg: BG_COLORS[(class_index * 7 + 2) % 6],
    }
}

fn render(style: &ClassStyle, res: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut data = Array3::<f64>::zeros((3, res, res));
    let cx = res as f64 * rng.gen_range(0.38..0.62);
    let cy = res as f64 * rng.gen_range(0.38..0.62);
    let r = res as f64 * rng.gen_range(0.20..0.30);
    let fg_jit: [f64; 3] = [
        rng.gen_range(-0.08..0.08),
        rng.gen_range(-0.08..0.08),
        rng.gen_range(-0.08..0.08),
    ];
    let bg_jit: [f64; 3] = [
        rng.gen_range(-0.08..0.08),
        rng.gen_range(-0.08..0.08),
        rng.gen_range(-0.08..0.08),
    ];
    let phase = rng.gen_range(0..4) as usize;
    let period = (res / 8).max(2);

    for y in 0..res {
        for x in 0..res {
            let fx = x as f64 + 0.5 - cx;
            let fy = y as f64 + 0.5 - cy;
            let inside = match style.shape {
                Shape::Circle => fx * fx + fy * fy <= r * r,
                Shape::Square => fx.abs() <= r * 0.9 && fy.abs() <= r * 0.9,
                Shape::Triangle => fy >= -r && fy <= r && fx.abs() <= (fy + r) / 2.0 * 0.9,
                Shape::Cross => fx.abs() <= r * 0.33 || fy.abs() <= r * 0.33,
                Shape::Ring => {
                    let d2 = fx * fx + fy * fy;
                    d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
                }
                Shape::Diamond => fx.abs() + fy.abs() <= r * 1.2,
            };
            // cross is unbounded along its arms; clip to the shape box
            let inside = inside
                && match style.shape {
                    Shape::Cross => fx.abs() <= r && fy.abs() <= r,
                    _ => true,
                };
            let bg_on = match style.bg_style {
                Background::Solid => false,
                Background::HStripes => (y + phase) / period % 2 == 0,
                Background::VStripes => (x + phase) / period % 2 == 0,
                Background::Dots => (y + phase) % (period * 2) < 2 && (x + phase) % (period * 2) < 2,
                Background::DiagStripes => (x + y + phase) / period % 2 == 0,
                Background::Checker => ((x + phase) / period + (y + phase) / period) % 2 == 0,
            };
            for c in 0..3 {
                let v = if inside {
                    style.fg[c] + fg_jit[c]
                } else if bg_on {
                    style.bg[c] * 0.4 + bg_jit[c] + 0.25
                } else {
                    style.bg[c] + bg_jit[c]
                };
                data[[c, y, x]] = (v + rng.gen_range(-0.05..0.05)).clamp(-1.0, 1.0);
            }
        }
    }
    Image::new(data)
}

/// Generate the dataset under `root` (one directory per class), write the
/// split file to `root/split.txt`, and return the split.
pub fn generate_synthetic_dataset(root: &Path, cfg: &SynthConfig) -> Result<SplitSpec> {
    let total = cfg.base_classes + cfg.val_classes + cfg.novel_classes;
    if total == 0 || cfg.images_per_class == 0 {
        return Err(Error::Config("synthetic dataset must be nonempty".into()));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut class_ids = Vec::with_capacity(total);
    for ci in 0..total {
        let id = format!("class_{ci:03}");
        let dir = root.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let style = class_style(ci);
        for ii in 0..cfg.images_per_class {
            let mut rng = rng_from_seed(derive_seed_indexed(
                cfg.seed,
                "synth-image",
                (ci * 100_000 + ii) as u64,
            ));
            let img = render(&style, cfg.resolution, &mut rng);
            img.save_png(&dir.join(format!("img_{ii:03}.png")))?;
        }
        class_ids.push(id);
    }
    let spec = SplitSpec {
        base_classes: class_ids[..cfg.base_classes].to_vec(),
        val_classes: class_ids[cfg.base_classes..cfg.base_classes + cfg.val_classes].to_vec(),
        novel_classes: class_ids[cfg.base_classes + cfg.val_classes..].to_vec(),
    };
    std::fs::write(root.join("split.txt"), spec.render())
        .map_err(|e| Error::io(root.join("split.txt"), e))?;
    Ok(spec)
}
