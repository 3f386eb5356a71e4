//! Anomaly maps and image, object and multi-modal scores.

mod export;

pub use export::{read_amap, read_index, visualize, write_amap, write_index, MapIndex, MapIndexEntry, AMAP_MAGIC};

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureStack, LayerFeatures};
use crate::error::{Error, Result};
use crate::objective::token_distances;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Percentage of the highest pixels averaged into the image score.
    pub top_percent: f64,
    /// Gaussian smoothing in output pixels; zero disables smoothing.
    pub sigma: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { top_percent: 1.0, sigma: 4.0 }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        check_percent(self.top_percent)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("scoring.sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

fn check_percent(z: f64) -> Result<()> {
    if !(z > 0.0 && z <= 100.0) {
        return Err(Error::Argument(format!("top percentage {z} outside (0, 100]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub image_id: String,
    /// Mean over groups of per-token `1 - cos`, on the token grid.
    pub token_map: Array2<f32>,
    /// Upsampled and smoothed map at input resolution.
    pub full_map: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub image_score: f64,
    pub object_score: Option<f64>,
    pub category: String,
    pub view: Option<String>,
    pub modality: Option<String>,
}

/// Per-token anomaly values averaged over `(target, reconstruction)` groups.
pub fn token_map(pairs: &[(ArrayView2<f32>, ArrayView2<f32>)], grid: (usize, usize)) -> Result<Array2<f32>> {
    if pairs.is_empty() {
        return Err(Error::Argument("anomaly map needs at least one group".into()));
    }
    let n = grid.0 * grid.1;
    let mut acc = vec![0.0f64; n];
    for (g, r) in pairs {
        if g.nrows() != n || g.dim() != r.dim() {
            return Err(Error::shape(format!("group shapes {:?}/{:?} do not match grid {grid:?}", g.dim(), r.dim())));
        }
        for (a, d) in acc.iter_mut().zip(token_distances(*g, *r)) {
            *a += d;
        }
    }
    let k = pairs.len() as f64;
    Ok(Array2::from_shape_vec(grid, acc.into_iter().map(|v| (v / k).clamp(0.0, 2.0) as f32).collect())
        .expect("grid size matches"))
}

/// Token map plus its upsampled, smoothed full-resolution version.
pub fn anomaly_map(
    image_id: impl Into<String>,
    pairs: &[(ArrayView2<f32>, ArrayView2<f32>)],
    grid: (usize, usize),
    size: (usize, usize),
    cfg: &ScoringConfig,
) -> Result<AnomalyMap> {
    let token_map = token_map(pairs, grid)?;
    let mut full_map = resize_bilinear(token_map.view(), size);
    if cfg.sigma > 0.0 {
        full_map = gaussian_blur(full_map.view(), cfg.sigma);
    }
    Ok(AnomalyMap { image_id: image_id.into(), token_map, full_map })
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: ArrayView2<f32>, size: (usize, usize)) -> Array2<f32> {
    let (sh, sw) = src.dim();
    let (h, w) = size;
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (x.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (x - i0 as f64).min(1.0) as f32)
            })
            .collect()
    };
    let ys = taps(h, sh);
    let xs = taps(w, sw);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (4.0 * sigma).round().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / total) as f32).collect()
}

/// Mirror index for half-sample symmetric boundaries (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian filter, radius `round(4σ)`, reflecting borders.
pub fn gaussian_blur(src: ArrayView2<f32>, sigma: f64) -> Array2<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = src.dim();
    let rows = Array2::from_shape_fn((h, w), |(i, j)| {
        k.iter().enumerate().map(|(t, &kv)| kv * src[[i, reflect(j as isize + t as isize - r, w)]]).sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        k.iter().enumerate().map(|(t, &kv)| kv * rows[[reflect(i as isize + t as isize - r, h), j]]).sum::<f32>()
    })
}

/// Mean of the `k` largest values.
///
/// The mean is formed as a sum over distinct values weighted by
/// `count / k`, so repeating every value `V` times with budget `V·k` yields
/// bit-identical results.
fn top_k_mean(values: &mut [f32], k: usize) -> f64 {
    let k = k.clamp(1, values.len());
    let cmp = |a: &f32, b: &f32| b.total_cmp(a);
    if k < values.len() {
        values.select_nth_unstable_by(k - 1, cmp);
    }
    let top = &mut values[..k];
    top.sort_unstable_by(cmp);
    let mut sum = 0.0f64;
    let mut i = 0;
    while i < k {
        let mut j = i;
        while j < k && top[j] == top[i] {
            j += 1;
        }
        sum += top[i] as f64 * ((j - i) as f64 / k as f64);
        i = j;
    }
    sum
}

fn budget(z_percent: f64, pixels: usize) -> usize {
    ((z_percent / 100.0 * pixels as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Mean of the top `z_percent` pixels, with `k = max(1, ceil(z/100 · H·W))`.
pub fn image_score(map: ArrayView2<f32>, z_percent: f64) -> Result<f64> {
    check_percent(z_percent)?;
    if map.is_empty() {
        return Err(Error::Argument("empty anomaly map".into()));
    }
    let mut v: Vec<f32> = map.iter().copied().collect();
    let k = budget(z_percent, v.len());
    Ok(top_k_mean(&mut v, k))
}

/// Top-`z_percent` mean over the pixels of all views pooled together.
///
/// The pixel budget is the sum of the per-view budgets, so `V` identical
/// views score exactly like one of them.
pub fn object_score(maps: &[ArrayView2<f32>], z_percent: f64) -> Result<f64> {
    check_percent(z_percent)?;
    if maps.is_empty() {
        return Err(Error::Argument("object score needs at least one view".into()));
    }
    let k: usize = maps.iter().map(|m| budget(z_percent, m.len())).sum();
    let mut v: Vec<f32> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    if v.is_empty() {
        return Err(Error::Argument("empty anomaly maps".into()));
    }
    Ok(top_k_mean(&mut v, k))
}

/// Elementwise average of aligned RGB and depth features, class tokens included.
pub fn fuse_rgb_3d(rgb: &FeatureStack, depth: &FeatureStack) -> Result<FeatureStack> {
    if rgb.grid != depth.grid || rgb.recentered != depth.recentered {
        return Err(Error::shape("RGB and depth stacks differ in grid or centering"));
    }
    if rgb.layers.keys().ne(depth.layers.keys()) {
        return Err(Error::shape("RGB and depth stacks tap different layers"));
    }
    let avg = |a: ArrayView2<f32>, b: ArrayView2<f32>| -> Result<Array2<f32>> {
        if a.dim() != b.dim() {
            return Err(Error::shape(format!("feature shapes {:?} vs {:?}", a.dim(), b.dim())));
        }
        Ok(Zip::from(&a).and(&b).map_collect(|&x, &y| (x + y) * 0.5))
    };
    let mut layers = std::collections::BTreeMap::new();
    for ((&i, a), b) in rgb.layers.iter().zip(depth.layers.values()) {
        let patches = avg(a.patches.view(), b.patches.view())?;
        let cls = avg(a.cls.view().insert_axis(ndarray::Axis(0)), b.cls.view().insert_axis(ndarray::Axis(0)))?
            .row(0)
            .to_owned();
        layers.insert(i, LayerFeatures { cls, patches });
    }
    Ok(FeatureStack { layers, grid: rgb.grid, recentered: rgb.recentered })
}

/// Non-aligned modalities are combined by adding their image scores.
pub fn multimodal_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Argument("multimodal score needs at least one modality".into()));
    }
    Ok(scores.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_simple_fn((h, w), || rng.random::<f32>())
    }

    #[test]
    fn token_map_reference_values() {
        let g = array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]];
        let same = token_map(&[(g.view(), g.view())], (2, 2)).unwrap();
        assert!(same.iter().all(|&v| v.abs() < 1e-6));
        let mut r = g.clone();
        r.row_mut(1).assign(&array![1.0, 0.0]);
        let m = token_map(&[(g.view(), r.view()), (g.view(), g.view())], (2, 2)).unwrap();
        assert!((m[[0, 1]] - 0.5).abs() < 1e-6);
        assert!(m[[0, 0]].abs() < 1e-6 && m[[1, 0]].abs() < 1e-6);
        let neg = -&g;
        let m = token_map(&[(g.view(), neg.view()), (g.view(), neg.view())], (2, 2)).unwrap();
        assert!(m.iter().all(|&v| (v - 2.0).abs() < 1e-6));
        assert!(matches!(token_map(&[(g.view(), g.view())], (3, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn image_score_reference_values() {
        let c = Array2::from_elem((10, 10), 0.3f32);
        for z in [0.5, 1.0, 37.0, 100.0] {
            assert!((image_score(c.view(), z).unwrap() - 0.3f32 as f64).abs() < 1e-12);
        }
        let mut hot = Array2::<f32>::zeros((28, 28));
        hot[[5, 9]] = 1.0;
        assert_eq!(image_score(hot.view(), 1.0).unwrap(), 0.125);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = rand_map(&mut rng, 7, 9);
        let mean = m.iter().map(|&v| v as f64).sum::<f64>() / 63.0;
        assert!((image_score(m.view(), 100.0).unwrap() - mean).abs() < 1e-9);
        assert!(image_score(m.view(), 0.0).is_err());
        assert!(image_score(m.view(), 101.0).is_err());
    }

    #[test]
    fn object_score_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w) in [(28, 28), (25, 30), (7, 7)] {
            let m = rand_map(&mut rng, h, w);
            let single = image_score(m.view(), 1.0).unwrap();
            assert_eq!(object_score(&[m.view()], 1.0).unwrap(), single);
            for v in 2..6 {
                let views = vec![m.view(); v];
                assert_eq!(object_score(&views, 1.0).unwrap(), single);
            }
        }
        assert!(object_score(&[], 1.0).is_err());
    }

    #[test]
    fn object_score_matches_pooled_sort() {
        let zero = Array2::<f32>::zeros((20, 20));
        let mut hot = Array2::<f32>::zeros((20, 20));
        for i in 0..3 {
            hot[[i, i]] = 0.5 + i as f32 / 10.0;
        }
        let got = object_score(&[zero.view(), hot.view()], 1.0).unwrap();
        let mut pooled: Vec<f64> = zero.iter().chain(hot.iter()).map(|&v| v as f64).collect();
        pooled.sort_by(|a, b| b.total_cmp(a));
        let want = pooled[..8].iter().sum::<f64>() / 8.0;
        assert!((got - want).abs() < 1e-12);
        assert!(got < image_score(hot.view(), 1.0).unwrap());
    }

    #[test]
    fn score_monotone_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = rand_map(&mut rng, 12, 12);
        let base = image_score(m.view(), 5.0).unwrap();
        let mut up = m.clone();
        up[[3, 3]] += 0.7;
        assert!(image_score(up.view(), 5.0).unwrap() >= base);
        let mut flat: Vec<f32> = m.iter().copied().collect();
        flat.reverse();
        let perm = Array2::from_shape_vec((12, 12), flat).unwrap();
        assert_eq!(image_score(perm.view(), 5.0).unwrap(), base);
    }

    #[test]
    fn resize_and_blur_preserve_constants() {
        let c = Array2::from_elem((4, 4), 0.7f32);
        let up = resize_bilinear(c.view(), (56, 56));
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let b = gaussian_blur(up.view(), 4.0);
        assert!(b.iter().all(|&v| (v - 0.7).abs() < 1e-5));
        let k = gaussian_kernel(4.0);
        assert_eq!(k.len(), 33);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn resize_interpolates_between_centres() {
        let src = array![[0.0f32, 1.0]];
        let up = resize_bilinear(src.view(), (1, 4));
        assert_eq!(up, array![[0.0, 0.25, 0.75, 1.0]]);
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(-5, 4), 3);
    }

    #[test]
    fn blur_spreads_mass_without_losing_it() {
        let mut m = Array2::<f32>::zeros((64, 64));
        m[[32, 32]] = 1.0;
        let b = gaussian_blur(m.view(), 4.0);
        assert!((b.sum() - 1.0).abs() < 1e-4);
        assert!(b[[32, 32]] < 0.02 && b[[32, 32]] == b.iter().copied().fold(0.0, f32::max));
    }

    fn stack(seed: u64) -> FeatureStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = BTreeMap::new();
        for i in [3, 4] {
            layers.insert(
                i,
                LayerFeatures {
                    cls: Array1::from_shape_simple_fn(5, || rng.random::<f32>()),
                    patches: rand_map(&mut rng, 4, 5),
                },
            );
        }
        FeatureStack { layers, grid: (2, 2), recentered: false }
    }

    #[test]
    fn fusion_properties() {
        let a = stack(0);
        assert_eq!(fuse_rgb_3d(&a, &a).unwrap(), a);
        let mut neg = a.clone();
        for l in neg.layers.values_mut() {
            l.patches.mapv_inplace(|v| -v);
            l.cls.mapv_inplace(|v| -v);
        }
        let z = fuse_rgb_3d(&a, &neg).unwrap();
        assert!(z.layers.values().all(|l| l.patches.iter().chain(l.cls.iter()).all(|&v| v == 0.0)));
        let b = stack(1);
        let f = fuse_rgb_3d(&a, &b).unwrap();
        for i in [3, 4] {
            for (idx, &v) in f.layers[&i].patches.indexed_iter() {
                let want = (a.layers[&i].patches[idx] as f64 + b.layers[&i].patches[idx] as f64) / 2.0;
                assert!((v as f64 - want).abs() <= 1e-7);
            }
        }
        let mut bad = b.clone();
        bad.grid = (1, 4);
        assert!(fuse_rgb_3d(&a, &bad).is_err());
    }

    #[test]
    fn multimodal_sums() {
        assert!((multimodal_score(&[0.3, 0.2]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(multimodal_score(&[0.42]).unwrap(), 0.42);
        assert!((multimodal_score(&[0.1, 0.25, 1.5]).unwrap() - 1.85).abs() < 1e-12);
        assert!(multimodal_score(&[]).is_err());
    }
}
