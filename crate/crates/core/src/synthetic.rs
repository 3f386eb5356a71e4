//! Procedural texture categories with pasted defects, written in the MVTec
//! directory layout. Used by the examples and tests as a stand-in dataset.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Diagonal sinusoidal stripes.
    Stripes,
    /// Two-tone checkerboard.
    Checker,
    /// Regular lattice of soft dots.
    Dots,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Stripes, Texture::Checker, Texture::Dots];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
            Texture::Dots => "dots",
        }
    }

    /// Colour at `(x, y)` for a sample with phase offsets `(px, py)` and pixel noise `noise`.
    fn shade(self, x: f64, y: f64, px: f64, py: f64) -> [f64; 3] {
        use std::f64::consts::TAU;
        match self {
            Texture::Stripes => {
                let t = 0.5 + 0.5 * (TAU * (x + y + px) / 12.0).sin();
                [0.25 + 0.5 * t, 0.35 + 0.3 * t, 0.55 - 0.2 * t]
            }
            Texture::Checker => {
                let c = (((x + px) / 14.0).floor() + ((y + py) / 14.0).floor()).rem_euclid(2.0);
                if c < 1.0 {
                    [0.8, 0.75, 0.6]
                } else {
                    [0.35, 0.3, 0.25]
                }
            }
            Texture::Dots => {
                let fx = ((x + px) / 10.0).fract() - 0.5;
                let fy = ((y + py) / 10.0).fract() - 0.5;
                let t = (-(fx * fx + fy * fy) / 0.05).exp();
                [0.3 + 0.5 * t, 0.5 + 0.2 * t, 0.3 + 0.1 * t]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defect {
    /// Solid blob of an off-palette colour.
    Stain,
    /// Patch of a different texture.
    Foreign,
    /// Thick contrasting line segment.
    Scratch,
}

impl Defect {
    pub const ALL: [Defect; 3] = [Defect::Stain, Defect::Foreign, Defect::Scratch];

    pub fn name(self) -> &'static str {
        match self {
            Defect::Stain => "stain",
            Defect::Foreign => "foreign",
            Defect::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub textures: Vec<Texture>,
    pub image_size: u32,
    pub train_per_category: usize,
    pub test_normal_per_category: usize,
    pub test_anomalous_per_category: usize,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            textures: Texture::ALL.to_vec(),
            image_size: 112,
            train_per_category: 40,
            test_normal_per_category: 15,
            test_anomalous_per_category: 15,
            noise: 0.03,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub category: String,
    pub train: bool,
    /// `None` for normal images.
    pub defect: Option<Defect>,
    pub image: RgbImage,
    pub mask: Option<GrayImage>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn render<R: Rng>(texture: Texture, size: u32, noise: f64, rng: &mut R) -> RgbImage {
    let (px, py) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
    let gain = rng.random_range(0.95..1.05);
    let normal = rand_distr::Normal::new(0.0, noise.max(1e-12)).expect("valid std");
    RgbImage::from_fn(size, size, |x, y| {
        let c = texture.shade(x as f64, y as f64, px, py);
        Rgb(c.map(|v| to_u8(v * gain + rng.sample(normal))))
    })
}

/// Pastes a defect in place and returns its binary mask.
fn paste<R: Rng>(img: &mut RgbImage, texture: Texture, defect: Defect, rng: &mut R) -> GrayImage {
    let size = img.width();
    let mut mask = GrayImage::new(size, size);
    let r = rng.random_range(9.0..15.0);
    let margin = r + 2.0;
    let cx = rng.random_range(margin..size as f64 - margin);
    let cy = rng.random_range(margin..size as f64 - margin);
    match defect {
        Defect::Stain => {
            let colour = [rng.random_range(0.7..1.0), rng.random_range(0.0..0.2), rng.random_range(0.0..0.3)];
            let (ax, ay) = (r * rng.random_range(0.7..1.0), r * rng.random_range(0.7..1.0));
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = ((x as f64 - cx) / ax, (y as f64 - cy) / ay);
                    if dx * dx + dy * dy <= 1.0 {
                        img.put_pixel(x, y, Rgb(colour.map(to_u8)));
                        mask.put_pixel(x, y, Luma([255]));
                    }
                }
            }
        }
        Defect::Foreign => {
            let others: Vec<Texture> = Texture::ALL.iter().copied().filter(|t| *t != texture).collect();
            let other = others[rng.random_range(0..others.len())];
            let patch = render(other, size, 0.0, rng);
            let half = r as i64;
            for y in (cy as i64 - half).max(0)..(cy as i64 + half).min(size as i64) {
                for x in (cx as i64 - half).max(0)..(cx as i64 + half).min(size as i64) {
                    let p = *patch.get_pixel(x as u32, y as u32);
                    // invert the foreign texture so it also differs in colour statistics
                    img.put_pixel(x as u32, y as u32, Rgb(p.0.map(|v| 255 - v)));
                    mask.put_pixel(x as u32, y as u32, Luma([255]));
                }
            }
        }
        Defect::Scratch => {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (angle.cos(), angle.sin());
            let len = 2.0 * r;
            let width = rng.random_range(2.5..4.0);
            let shade = if rng.random_bool(0.5) { 0.02 } else { 0.98 };
            for y in 0..size {
                for x in 0..size {
                    let (vx, vy) = (x as f64 - cx, y as f64 - cy);
                    let along = vx * dx + vy * dy;
                    let across = (vx * dy - vy * dx).abs();
                    if along.abs() <= len / 2.0 && across <= width / 2.0 {
                        img.put_pixel(x, y, Rgb([to_u8(shade); 3]));
                        mask.put_pixel(x, y, Luma([255]));
                    }
                }
            }
        }
    }
    mask
}

/// Generates the whole dataset in memory, deterministically from `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticImage>> {
    if spec.textures.is_empty() || spec.image_size < 32 {
        return Err(Error::config("synthetic dataset needs at least one texture and images of 32 px or more"));
    }
    let mut out = Vec::new();
    for (ci, &tex) in spec.textures.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1000).wrapping_add(ci as u64));
        let normal = |rng: &mut ChaCha8Rng, train| SyntheticImage {
            category: tex.name().to_string(),
            train,
            defect: None,
            image: render(tex, spec.image_size, spec.noise, rng),
            mask: None,
        };
        for _ in 0..spec.train_per_category {
            out.push(normal(&mut rng, true));
        }
        for _ in 0..spec.test_normal_per_category {
            out.push(normal(&mut rng, false));
        }
        for i in 0..spec.test_anomalous_per_category {
            let defect = Defect::ALL[i % Defect::ALL.len()];
            let mut image = render(tex, spec.image_size, spec.noise, &mut rng);
            let mask = paste(&mut image, tex, defect, &mut rng);
            out.push(SyntheticImage { category: tex.name().to_string(), train: false, defect: Some(defect), image, mask: Some(mask) });
        }
    }
    Ok(out)
}

/// Writes the dataset under `root` as `<category>/{train,test}/<defect|good>/NNN.png`
/// with masks in `<category>/ground_truth/<defect>/NNN_mask.png`.
pub fn write_mvtec(root: &Path, spec: &SyntheticSpec) -> Result<usize> {
    let images = generate(spec)?;
    let mut counters = std::collections::HashMap::new();
    for img in &images {
        let split = if img.train { "train" } else { "test" };
        let class = img.defect.map_or("good", Defect::name);
        let dir = root.join(&img.category).join(split).join(class);
        std::fs::create_dir_all(&dir)?;
        let n = counters.entry(dir.clone()).or_insert(0usize);
        let stem = format!("{:03}", *n);
        *n += 1;
        img.image.save(dir.join(format!("{stem}.png")))?;
        if let Some(mask) = &img.mask {
            let gt = root.join(&img.category).join("ground_truth").join(class);
            std::fs::create_dir_all(&gt)?;
            mask.save(gt.join(format!("{stem}_mask.png")))?;
        }
    }
    Ok(images.len())
}
