//! Feature aggregation and the noisy MLP bottleneck.

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureStack, LayerSelection};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, join, Linear, Parameterized, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Dropout,
    FeatureJitter,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckConfig {
    pub num_layers: usize,
    /// Zero means four times the embedding width.
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub noise_mode: NoiseMode,
    pub jitter_scale: f64,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self { num_layers: 3, hidden_dim: 0, dropout_rate: 0.2, noise_mode: NoiseMode::Dropout, jitter_scale: 20.0 }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.num_layers == 0 {
            return Err(Error::config("bottleneck.num_layers must be at least 1"));
        }
        if self.jitter_scale < 0.0 || !self.jitter_scale.is_finite() {
            return Err(Error::config("bottleneck.jitter_scale must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn hidden(&self, dim: usize) -> usize {
        if self.hidden_dim == 0 {
            4 * dim
        } else {
            self.hidden_dim
        }
    }
}

/// Summed patch tokens of the tapped layers, `N × d` per image.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedFeature {
    pub tokens: Array2<f32>,
}

/// Elementwise sum of the selected layers' patch tokens.
pub fn aggregate(stack: &FeatureStack, selection: &LayerSelection) -> Result<AggregatedFeature> {
    stack.check(selection)?;
    let tokens = stack.sum_patches(selection.indices())?;
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("aggregated features contain non-finite values".into()));
    }
    Ok(AggregatedFeature { tokens })
}

/// Bernoulli(1-p) keep mask pre-scaled by `1/(1-p)` (inverted dropout).
pub fn dropout_mask<F: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), p: f64) -> Array2<F> {
    let keep = 1.0 - p;
    let scale = F::from_f64c(1.0 / keep);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { scale } else { F::zero() })
}

/// `num_layers` linear+GELU layers, widths `d → h → … → h → d`.
#[derive(Clone, Debug)]
pub struct NoisyBottleneck<F> {
    pub layers: Vec<Linear<F>>,
    pub cfg: BottleneckConfig,
}

#[derive(Clone, Debug)]
pub struct BottleneckCache<F> {
    inputs: Vec<Array2<F>>,
    pre_acts: Vec<Array2<F>>,
    masks: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> NoisyBottleneck<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, cfg: BottleneckConfig) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden(dim);
        let n = cfg.num_layers;
        let layers = (0..n)
            .map(|i| {
                let input = if i == 0 { dim } else { hidden };
                let output = if i + 1 == n { dim } else { hidden };
                Linear::init(rng, input, output, 0.02)
            })
            .collect();
        Ok(Self { layers, cfg })
    }

    fn check_input(z0: ArrayView2<F>) -> Result<()> {
        if z0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("bottleneck input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Train-time feature jitter: Gaussian noise with per-token std `s·‖z‖₂/d`.
    fn jitter<R: Rng + ?Sized>(&self, z0: ArrayView2<F>, rng: &mut R) -> Array2<F> {
        let d = F::from_usize(z0.ncols()).unwrap();
        let s = F::from_f64c(self.cfg.jitter_scale);
        let mut out = z0.to_owned();
        for mut row in out.outer_iter_mut() {
            let std = s * row.iter().map(|&v| v * v).sum::<F>().sqrt() / d;
            row.mapv_inplace(|v| v + std * F::from_f64c(rng.sample::<f64, _>(StandardNormal)));
        }
        out
    }

    /// Runs the bottleneck; `training` enables the configured noise.
    pub fn forward(&self, z0: ArrayView2<F>, training: bool, seed: u64) -> Result<Array2<F>> {
        Ok(self.forward_train_impl(z0, training, seed)?.0)
    }

    pub fn forward_train(&self, z0: ArrayView2<F>, seed: u64) -> Result<(Array2<F>, BottleneckCache<F>)> {
        self.forward_train_impl(z0, true, seed)
    }

    fn forward_train_impl(&self, z0: ArrayView2<F>, training: bool, seed: u64) -> Result<(Array2<F>, BottleneckCache<F>)> {
        Self::check_input(z0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = if training && self.cfg.noise_mode == NoiseMode::FeatureJitter {
            self.jitter(z0, &mut rng)
        } else {
            z0.to_owned()
        };
        let dropout = training && self.cfg.noise_mode == NoiseMode::Dropout && self.cfg.dropout_rate > 0.0;
        let mut cache = BottleneckCache { inputs: Vec::new(), pre_acts: Vec::new(), masks: Vec::new() };
        for layer in &self.layers {
            let pre = layer.forward(x.view());
            let mut y = gelu(pre.view());
            let mask = dropout.then(|| dropout_mask::<F, _>(&mut rng, y.dim(), self.cfg.dropout_rate));
            if let Some(m) = &mask {
                y *= m;
            }
            cache.inputs.push(x);
            cache.pre_acts.push(pre);
            cache.masks.push(mask);
            x = y;
        }
        Ok((x, cache))
    }

    /// Accumulates parameter gradients; returns `dL/dz0` when requested.
    pub fn backward(
        &self,
        cache: &BottleneckCache<F>,
        dz: ArrayView2<F>,
        grad: &mut Self,
        input_grad: bool,
    ) -> Option<Array2<F>> {
        let mut g = dz.to_owned();
        for i in (0..self.layers.len()).rev() {
            if let Some(m) = &cache.masks[i] {
                g *= m;
            }
            let dpre = gelu_backward(cache.pre_acts[i].view(), g.view());
            if i == 0 && !input_grad {
                self.layers[i].backward_params(cache.inputs[i].view(), dpre.view(), &mut grad.layers[i]);
                return None;
            }
            g = self.layers[i].backward(cache.inputs[i].view(), dpre.view(), &mut grad.layers[i]);
        }
        Some(g)
    }

    /// Pre-mask activation of every layer with the noise disabled.
    pub fn layer_activations(&self, z0: ArrayView2<F>) -> Vec<Array2<F>> {
        let mut x = z0.to_owned();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = gelu(layer.forward(x.view()).view());
            out.push(x.clone());
        }
        out
    }
}

impl<F: Scalar> Parameterized<F> for NoisyBottleneck<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// Pearson correlation of two equally shaped arrays.
pub fn correlation<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().map(|v| v.as_f64()).sum::<f64>() / n, b.iter().map(|v| v.as_f64()).sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        let (dx, dy) = (x.as_f64() - ma, y.as_f64() - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    });
    cov / (va.sqrt() * vb.sqrt()).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LayerFeatures;
    use crate::nn::trunc_normal;
    use ndarray::Array1;
    use std::collections::BTreeMap;

    fn stack_of(layers: Vec<Array2<f32>>) -> (FeatureStack, LayerSelection) {
        let mut map = BTreeMap::new();
        let idx: Vec<usize> = (3..3 + layers.len()).collect();
        for (i, p) in idx.iter().zip(layers) {
            map.insert(*i, LayerFeatures { cls: Array1::zeros(p.ncols()), patches: p });
        }
        (FeatureStack { layers: map, grid: (2, 2), recentered: true }, LayerSelection::new(idx, 12).unwrap())
    }

    #[test]
    fn aggregate_is_a_plain_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f: Array2<f32> = trunc_normal(&mut rng, (4, 3), 1.0);
        let (s, sel) = stack_of(vec![Array2::zeros((4, 3)); 8]);
        assert!(aggregate(&s, &sel).unwrap().tokens.iter().all(|&v| v == 0.0));
        let (s, sel) = stack_of(vec![f.clone(); 8]);
        let agg = aggregate(&s, &sel).unwrap();
        assert!(agg.tokens.iter().zip(f.iter()).all(|(a, b)| (a - 8.0 * b).abs() < 1e-5));
        let mut layers = vec![f.clone(), -&f];
        layers.extend(vec![Array2::zeros((4, 3)); 6]);
        let (s, sel) = stack_of(layers);
        assert!(aggregate(&s, &sel).unwrap().tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_rejects_mismatched_layers() {
        let (mut s, sel) = stack_of(vec![Array2::zeros((4, 3)); 8]);
        s.layers.get_mut(&5).unwrap().patches = Array2::zeros((3, 3));
        assert!(matches!(aggregate(&s, &sel), Err(Error::Shape(_))));
    }

    #[test]
    fn widths_follow_four_x_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = NoisyBottleneck::<f32>::new(&mut rng, 16, BottleneckConfig::default()).unwrap();
        let shapes: Vec<_> = b.layers.iter().map(|l| l.weight.dim()).collect();
        assert_eq!(shapes, vec![(16, 64), (64, 64), (64, 16)]);
    }

    #[test]
    fn no_dropout_means_train_equals_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BottleneckConfig { dropout_rate: 0.0, ..Default::default() };
        let b = NoisyBottleneck::<f32>::new(&mut rng, 8, cfg).unwrap();
        let z: Array2<f32> = trunc_normal(&mut rng, (5, 8), 1.0);
        assert_eq!(b.forward(z.view(), true, 3).unwrap(), b.forward(z.view(), false, 3).unwrap());
    }

    #[test]
    fn eval_is_deterministic_and_train_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BottleneckConfig { dropout_rate: 0.4, ..Default::default() };
        let b = NoisyBottleneck::<f32>::new(&mut rng, 8, cfg).unwrap();
        let z: Array2<f32> = trunc_normal(&mut rng, (5, 8), 1.0);
        assert_eq!(b.forward(z.view(), false, 1).unwrap(), b.forward(z.view(), false, 2).unwrap());
        assert_eq!(b.forward(z.view(), true, 7).unwrap(), b.forward(z.view(), true, 7).unwrap());
        assert_ne!(b.forward(z.view(), true, 7).unwrap(), b.forward(z.view(), true, 8).unwrap());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = NoisyBottleneck::<f32>::new(&mut rng, 4, BottleneckConfig::default()).unwrap();
        let mut z = Array2::<f32>::zeros((2, 4));
        z[[1, 1]] = f32::NAN;
        assert!(matches!(b.forward(z.view(), false, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            BottleneckConfig { dropout_rate: 1.0, ..Default::default() },
            BottleneckConfig { dropout_rate: -0.1, ..Default::default() },
            BottleneckConfig { num_layers: 0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn jitter_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = BottleneckConfig { noise_mode: NoiseMode::FeatureJitter, jitter_scale: 5.0, ..Default::default() };
        let b = NoisyBottleneck::<f32>::new(&mut rng, 8, cfg).unwrap();
        let z: Array2<f32> = trunc_normal(&mut rng, (5, 8), 1.0);
        assert_eq!(b.forward(z.view(), false, 1).unwrap(), b.forward(z.view(), false, 2).unwrap());
        assert_ne!(b.forward(z.view(), true, 1).unwrap(), b.forward(z.view(), false, 1).unwrap());
        let j = b.jitter(z.view(), &mut ChaCha8Rng::seed_from_u64(0));
        // per-token std is s·‖z‖/d; check the overall magnitude is in that ballpark
        let noise: f64 = (&j - &z).iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
        let expect: f64 = z.outer_iter().map(|r| (5.0 * r.dot(&r).sqrt() as f64 / 8.0).powi(2) * 8.0).sum();
        assert!(noise > 0.2 * expect && noise < 5.0 * expect);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = BottleneckConfig { dropout_rate: 0.3, hidden_dim: 6, ..Default::default() };
        let mut b = NoisyBottleneck::<f64>::new(&mut rng, 4, cfg).unwrap();
        b.visit_mut("", &mut |_, mut v| v.mapv_inplace(|x| x * 30.0 + 0.05));
        let z: Array2<f64> = trunc_normal(&mut rng, (3, 4), 1.0);
        let w: Array2<f64> = trunc_normal(&mut rng, (3, 4), 1.0);
        let loss = |b: &NoisyBottleneck<f64>, z: &Array2<f64>| (&b.forward(z.view(), true, 11).unwrap() * &w).sum();
        let (_, cache) = b.forward_train(z.view(), 11).unwrap();
        let mut g = b.zeroed();
        let dz = b.backward(&cache, w.view(), &mut g, true).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut zp = z.clone();
                zp[[i, j]] += h;
                let mut zm = z.clone();
                zm[[i, j]] -= h;
                let fd = (loss(&b, &zp) - loss(&b, &zm)) / (2.0 * h);
                assert!((fd - dz[[i, j]]).abs() <= 1e-5 * fd.abs().max(1.0));
            }
        }
        let mut bp = b.clone();
        bp.layers[1].weight[[2, 3]] += h;
        let mut bm = b.clone();
        bm.layers[1].weight[[2, 3]] -= h;
        let fd = (loss(&bp, &z) - loss(&bm, &z)) / (2.0 * h);
        assert!((fd - g.layers[1].weight[[2, 3]]).abs() <= 1e-5 * fd.abs().max(1.0));
    }

    #[test]
    fn masks_are_uncorrelated_across_layers_and_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Array2<f64> = dropout_mask(&mut rng, (64, 64), 0.5);
        let b: Array2<f64> = dropout_mask(&mut rng, (64, 64), 0.5);
        assert!(correlation(a.view(), b.view()).abs() < 0.05);
        let c: Array2<f64> = dropout_mask(&mut ChaCha8Rng::seed_from_u64(7), (64, 64), 0.5);
        assert!(correlation(a.view(), c.view()).abs() < 0.05);
    }
}
