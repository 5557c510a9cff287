//! Image container and file I/O.
//!
//! Images are held as `[C, H, W]` arrays of `f64` in `[-1, 1]` (the
//! generator's output range). File I/O converts to/from 8-bit `[0, 1]` PNG.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// An image in `[C, H, W]` layout with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        Image { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean absolute pixel difference to another image of the same shape.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// Horizontal mirror (flip along the width axis).
    pub fn flip_horizontal(&self) -> Image {
        let (c, h, w) = self.shape();
        let mut out = Array3::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ci, y, x]] = self.data[[ci, y, w - 1 - x]];
                }
            }
        }
        Image::new(out)
    }

    /// Clamp values into `[-1, 1]`.
    pub fn clamped(&self) -> Image {
        Image::new(self.data.mapv(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (c, h, w) = self.shape();
        if c != 3 && c != 1 {
            return Err(Error::Image(format!(
                "can only write 1- or 3-channel images, got {c}"
            )));
        }
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |ci: usize| {
                    let v = self.data[[ci.min(c - 1), y, x]];
                    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
                };
                buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        buf.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for ci in 0..3 {
                    data[[ci, y, x]] = f64::from(p[ci]) / 255.0 * 2.0 - 1.0;
                }
            }
        }
        Ok(Image::new(data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_involution() {
        let mut img = Image::zeros(3, 4, 5);
        img.data[[0, 1, 2]] = 0.5;
        img.data[[2, 3, 0]] = -0.25;
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut img = Image::zeros(3, 6, 6);
        img.data[[1, 2, 3]] = 1.0;
        img.data[[0, 0, 0]] = -1.0;
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.shape(), (3, 6, 6));
        assert!(img.mean_abs_diff(&back) < 1.0 / 255.0);
    }
}
