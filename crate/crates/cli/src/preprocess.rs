//! Image decoding and normalization to the network's input layout.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb32FImage};
use sbcformer::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSpec {
    pub resize_short: u32,
    pub center_crop: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            resize_short: 256,
            center_crop: 224,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.center_crop > 0, "center crop must be positive");
        ensure!(
            self.center_crop <= self.resize_short,
            "center crop {} exceeds the resized short side {}",
            self.center_crop,
            self.resize_short
        );
        ensure!(self.std.iter().all(|&s| s > 0.0), "std must be positive, got {:?}", self.std);
        Ok(())
    }
}

pub fn preprocess_image(path: impl AsRef<Path>, spec: &PreprocessSpec) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).with_context(|| format!("cannot decode image {}", path.display()))?;
    preprocess(&img, spec)
}

/// Resizes the short side with bilinear filtering (in floating point, so no
/// 8-bit requantization), center-crops, scales to [0, 1] and standardizes.
/// Grayscale and alpha inputs are converted to RGB first.
pub fn preprocess(img: &DynamicImage, spec: &PreprocessSpec) -> Result<Tensor> {
    spec.validate()?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    ensure!(w > 0 && h > 0, "empty image");
    let (rw, rh) = resized_dims(w, h, spec.resize_short);
    let resized: Rgb32FImage = if (rw, rh) == (w, h) {
        rgb
    } else {
        imageops::resize(&rgb, rw, rh, FilterType::Triangle)
    };
    let crop = spec.center_crop;
    let (x0, y0) = ((rw - crop) / 2, (rh - crop) / 2);
    let n = (crop * crop) as usize;
    let mut data = vec![0.0f32; 3 * n];
    for y in 0..crop {
        for x in 0..crop {
            let px = resized.get_pixel(x0 + x, y0 + y);
            let i = (y * crop + x) as usize;
            for c in 0..3 {
                data[c * n + i] = (px[c] - spec.mean[c]) / spec.std[c];
            }
        }
    }
    Ok(Tensor::new(vec![1, 3, crop as usize, crop as usize], data)?)
}

/// Scales so the shorter side equals `short`, rounding the other side.
fn resized_dims(w: u32, h: u32, short: u32) -> (u32, u32) {
    let scale = |long: u32, short_side: u32| ((long as f64 * short as f64 / short_side as f64).round() as u32).max(short);
    if w <= h {
        (short, scale(h, w))
    } else {
        (scale(w, h), short)
    }
}
