use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{normalize_image, IMAGENET_MEAN, IMAGENET_STD};
use crate::error::{Error, Result};
use crate::scoring::resize_bilinear;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    pub image_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub interpolation: Interpolation,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self { image_size: 392, mean: IMAGENET_MEAN, std: IMAGENET_STD, interpolation: Interpolation::Bilinear }
    }
}

impl PreprocessSpec {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.image_size == 0 || self.image_size % patch_size != 0 {
            return Err(Error::config(format!(
                "data.image_size {} is not a positive multiple of the patch size {patch_size}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Decodes an image into `H × W × 3` floats in `[0, 1]`; single-channel inputs are replicated.
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Ingest { path: path.to_path_buf(), reason: e.to_string() })?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw()).expect("RGB buffer length"))
}

/// Bilinear resize of every channel.
pub fn resize_image(img: &Array3<f32>, size: (usize, usize)) -> Array3<f32> {
    if img.dim().0 == size.0 && img.dim().1 == size.1 {
        return img.clone();
    }
    let channels: Vec<Array2<f32>> = img.axis_iter(Axis(2)).map(|c| resize_bilinear(c, size)).collect();
    let views: Vec<_> = channels.iter().map(|c| c.view()).collect();
    ndarray::stack(Axis(2), &views).expect("equal channel shapes")
}

/// Load, resize to a square of `image_size`, and normalize.
pub fn preprocess(path: &Path, spec: &PreprocessSpec) -> Result<Array3<f32>> {
    let mut img = resize_image(&load_image(path)?, (spec.image_size, spec.image_size));
    normalize_image(&mut img, spec.mean, spec.std);
    Ok(img)
}

/// Loads a ground-truth mask, nearest-neighbour resized; nonzero pixels are foreground.
pub fn load_mask(path: &Path, size: (usize, usize)) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|e| Error::Ingest { path: path.to_path_buf(), reason: e.to_string() })?;
    let gray = img.to_luma32f();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(Array2::from_shape_fn(size, |(i, j)| {
        let y = ((i as f64 + 0.5) * h as f64 / size.0 as f64) as usize;
        let x = ((j as f64 + 0.5) * w as f64 / size.1 as f64) as usize;
        gray.get_pixel(x.min(w - 1) as u32, y.min(h - 1) as u32).0[0] > 0.5
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub hflip: bool,
    pub vflip: bool,
    pub flip_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub rotate_deg: f64,
    /// Maximum absolute shift as a fraction of the image side.
    pub translate: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { hflip: true, vflip: true, flip_prob: 0.5, rotate_deg: 15.0, translate: 0.1 }
    }
}

/// Random flips, then a rotation about the centre plus a shift; uncovered pixels become 0.
///
/// Applied to normalized images, so the fill value is the dataset mean colour.
pub fn augment<R: Rng + ?Sized>(img: &Array3<f32>, spec: &AugmentSpec, rng: &mut R) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let flip_x = spec.hflip && rng.random::<f64>() < spec.flip_prob;
    let flip_y = spec.vflip && rng.random::<f64>() < spec.flip_prob;
    let angle = rng.random_range(-1.0..=1.0) * spec.rotate_deg.to_radians();
    let tx = rng.random_range(-1.0..=1.0) * spec.translate * w as f64;
    let ty = rng.random_range(-1.0..=1.0) * spec.translate * h as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            // inverse map: undo the shift, then the rotation, then the flips
            let (dy, dx) = (i as f64 - cy - ty, j as f64 - cx - tx);
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            let sy = if flip_y { h as f64 - 1.0 - sy } else { sy };
            let sx = if flip_x { w as f64 - 1.0 - sx } else { sx };
            if sy < 0.0 || sx < 0.0 || sy > h as f64 - 1.0 || sx > w as f64 - 1.0 {
                continue;
            }
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
                let bottom = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
                out[[i, j, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}
