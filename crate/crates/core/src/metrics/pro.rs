//! Per-region overlap and its normalized area up to a false-positive limit.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// 8-connected labelling of `mask`; background is 0, regions are `1..=count`.
pub fn connected_components(mask: ArrayView2<bool>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        let (sy, sx) = (start / w, start % w);
        if !mask[[sy, sx]] || labels[[sy, sx]] != 0 {
            continue;
        }
        count += 1;
        labels[[sy, sx]] = count;
        stack.push((sy, sx));
        while let Some((y, x)) = stack.pop() {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = count;
                        stack.push((ny, nx));
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// `(fpr, pro)` after each distinct threshold from high to low, starting at `(0, 0)`.
///
/// PRO averages, over every connected ground-truth region of every image,
/// the fraction of the region's pixels at or above the threshold.
pub fn pro_curve(maps: &[ArrayView2<f32>], masks: &[ArrayView2<bool>]) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() {
        return Err(Error::Argument(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    // per pixel: score and the global region id (0 for normal pixels)
    let mut pixels: Vec<(f32, u32)> = Vec::new();
    let mut region_sizes: Vec<usize> = vec![0];
    for (map, mask) in maps.iter().zip(masks) {
        if map.dim() != mask.dim() {
            return Err(Error::shape(format!("map {:?} vs mask {:?}", map.dim(), mask.dim())));
        }
        let (labels, count) = connected_components(*mask);
        let offset = region_sizes.len() as u32 - 1;
        region_sizes.extend(std::iter::repeat_n(0, count));
        for (&s, &l) in map.iter().zip(labels.iter()) {
            if s.is_nan() {
                return Err(Error::Numeric("NaN in anomaly map".into()));
            }
            let id = if l == 0 { 0 } else { l + offset };
            region_sizes[id as usize] += 1;
            pixels.push((s, id));
        }
    }
    let regions = region_sizes.len() - 1;
    let negatives = region_sizes[0];
    if regions == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs at least one anomalous region".into()));
    }
    if negatives == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs at least one normal pixel".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = vec![(0.0, 0.0)];
    let mut fp = 0usize;
    let mut overlap_sum = 0.0f64;
    for (i, &(score, id)) in pixels.iter().enumerate() {
        if id == 0 {
            fp += 1;
        } else {
            overlap_sum += 1.0 / region_sizes[id as usize] as f64;
        }
        if pixels.get(i + 1).is_none_or(|next| next.0 != score) {
            curve.push((fp as f64 / negatives as f64, overlap_sum / regions as f64));
        }
    }
    Ok(curve)
}

/// Trapezoidal area under `curve` (sorted by x) on `[0, limit]`.
fn partial_area(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area
}

/// Area under the PRO-vs-FPR curve up to `fpr_limit`, divided by `fpr_limit`.
pub fn aupro(maps: &[ArrayView2<f32>], masks: &[ArrayView2<bool>], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Argument(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    Ok(partial_area(&pro_curve(maps, masks)?, fpr_limit) / fpr_limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eight_connectivity_joins_diagonals() {
        let m = array![[true, false, false], [false, true, false], [false, false, false], [true, true, false]];
        let (labels, n) = connected_components(m.view());
        assert_eq!(n, 2);
        assert_eq!(labels[[0, 0]], labels[[1, 1]]);
        assert_ne!(labels[[0, 0]], labels[[3, 0]]);
        assert_eq!(labels[[2, 2]], 0);
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let mut mask = Array2::from_elem((8, 8), false);
        for i in 2..5 {
            mask[[i, i]] = true;
            mask[[i, 7]] = true;
        }
        let good = mask.mapv(|b| if b { 1.0f32 } else { 0.0 });
        let bad = mask.mapv(|b| if b { 0.0f32 } else { 1.0 });
        assert!((aupro(&[good.view()], &[mask.view()], 0.3).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(aupro(&[bad.view()], &[mask.view()], 0.3).unwrap(), 0.0);
        let none = Array2::from_elem((8, 8), false);
        assert!(matches!(aupro(&[good.view()], &[none.view()], 0.3), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn partial_area_interpolates_at_limit() {
        let c = [(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)];
        assert!((partial_area(&c, 0.25) - 0.25 * 0.5 / 2.0).abs() < 1e-15);
        assert!((partial_area(&c, 1.0) - 0.75).abs() < 1e-15);
    }
}
