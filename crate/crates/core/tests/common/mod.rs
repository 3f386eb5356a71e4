//! Independent reference implementations used as test oracles.
//!
//! Each one is written the slow, obvious way and shares no code with the library.

#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};

/// Fraction of (positive, negative) pairs ordered correctly, ties counting half.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut good = 0.0;
    let mut total = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                total += 1.0;
                if si > sj {
                    good += 1.0;
                } else if si == sj {
                    good += 0.5;
                }
            }
        }
    }
    good / total
}

/// Distinct scores, highest first.
fn thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

/// `(tp, fp)` when everything scoring at least `t` is called positive.
fn confusion_at(scores: &[f64], labels: &[u8], t: f64) -> (usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    for (s, l) in scores.iter().zip(labels) {
        if *s >= t {
            if *l == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

/// Step-wise average precision: recall increments weighted by precision at each threshold.
pub fn ap_steps(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds(scores) {
        let (tp, fp) = confusion_at(scores, labels, t);
        let recall = tp as f64 / pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Maximum F1 over every threshold.
pub fn f1_scan(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    thresholds(scores)
        .into_iter()
        .map(|t| {
            let (tp, fp) = confusion_at(scores, labels, t);
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / pos as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .fold(0.0, f64::max)
}

/// Union-find labelling with 8-neighbourhood; returns per-pixel region ids (0 = background).
pub fn regions_union_find(mask: ArrayView2<bool>) -> Vec<usize> {
    let (h, w) = mask.dim();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            for (dy, dx) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && nx < w as i64 && mask[[ny as usize, nx as usize]] {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, ny as usize * w + nx as usize);
                    parent[a] = b;
                }
            }
        }
    }
    let mut ids = std::collections::HashMap::new();
    (0..h * w)
        .map(|i| {
            if !mask[[i / w, i % w]] {
                0
            } else {
                let root = find(&mut parent, i);
                let next = ids.len() + 1;
                *ids.entry(root).or_insert(next)
            }
        })
        .collect()
}

/// Normalized area under PRO(FPR) up to `limit`, evaluating every threshold directly.
pub fn aupro_direct(maps: &[Array2<f32>], masks: &[Array2<bool>], limit: f64) -> f64 {
    // regions as lists of scores; normal pixels pooled
    let mut regions: Vec<Vec<f64>> = Vec::new();
    let mut normal: Vec<f64> = Vec::new();
    for (m, k) in maps.iter().zip(masks) {
        let ids = regions_union_find(k.view());
        let base = regions.len();
        let count = ids.iter().copied().max().unwrap_or(0);
        regions.extend((0..count).map(|_| Vec::new()));
        for (s, id) in m.iter().zip(ids) {
            if id == 0 {
                normal.push(*s as f64);
            } else {
                regions[base + id - 1].push(*s as f64);
            }
        }
    }
    let all: Vec<f64> = maps.iter().flat_map(|m| m.iter().map(|&v| v as f64)).collect();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds(&all) {
        let fpr = normal.iter().filter(|&&s| s >= t).count() as f64 / normal.len() as f64;
        let pro = regions.iter().map(|r| r.iter().filter(|&&s| s >= t).count() as f64 / r.len() as f64).sum::<f64>()
            / regions.len() as f64;
        pts.push((fpr, pro));
    }
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        let (xe, ye) = if x1 > limit { (limit, y0 + (y1 - y0) * (limit - x0) / (x1 - x0)) } else { (x1, y1) };
        area += (xe - x0) * (y0 + ye) / 2.0;
    }
    area / limit
}

/// Elementwise `elu(x) + 1`.
pub fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Linear attention evaluated through its explicit N × N weight matrix.
pub fn linear_attention_explicit(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let n = q.nrows();
    let mut out = Array2::zeros((n, v.ncols()));
    for i in 0..n {
        let mut weights = vec![0.0; n];
        for (j, w) in weights.iter_mut().enumerate() {
            *w = q.row(i).iter().zip(k.row(j).iter()).map(|(&a, &b)| phi(a) * phi(b)).sum::<f64>();
        }
        let z: f64 = weights.iter().sum();
        for (j, w) in weights.iter().enumerate() {
            for c in 0..v.ncols() {
                out[[i, c]] += w / z * v[[j, c]];
            }
        }
    }
    out
}

/// `1 - cos` of two rows computed in f64.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-8)
}

/// Warmup-then-cosine schedule written out directly.
pub fn lr_reference(i: u64, peak: f64, floor: f64, warmup: u64, total: u64) -> f64 {
    if i < warmup {
        i as f64 * (peak / warmup as f64)
    } else if i >= total {
        floor
    } else {
        let angle = std::f64::consts::PI * (i - warmup) as f64 / (total - warmup) as f64;
        floor + (peak - floor) * (1.0 + angle.cos()) / 2.0
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}
