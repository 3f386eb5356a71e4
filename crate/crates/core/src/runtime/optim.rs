//! Learning-rate schedule and the stabilized AdamW optimizer.

use ndarray::{ArrayD, Zip};

use super::config::TrainConfig;
use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::nn::Parameterized;

/// Linear warmup from zero to `peak`, then cosine decay from `peak` to `floor`
/// reached exactly at `total`. Iterations past `total` stay at `floor`.
pub fn lr_schedule(iter: u64, peak: f64, floor: f64, warmup: u64, total: u64) -> f64 {
    if iter < warmup {
        return peak * iter as f64 / warmup as f64;
    }
    if iter >= total {
        return floor;
    }
    let progress = (iter - warmup) as f64 / (total - warmup) as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StableAdamWConfig {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
}

impl From<&TrainConfig> for StableAdamWConfig {
    fn from(t: &TrainConfig) -> Self {
        Self { betas: t.betas, eps: t.eps, weight_decay: t.weight_decay, clip_threshold: t.clip_threshold }
    }
}

/// AdamW whose per-tensor step size shrinks when the update RMS
/// `sqrt(mean(g² / v̂))` exceeds `clip_threshold`.
///
/// Weight decay is decoupled and uses the same shrunken rate.
#[derive(Clone, Debug)]
pub struct StableAdamW {
    pub cfg: StableAdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

fn flatten<P: Parameterized<f32>>(module: &P) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    module.visit("", &mut |_, v| out.push(v.iter().copied().collect()));
    out
}

impl StableAdamW {
    pub fn new<P: Parameterized<f32>>(cfg: StableAdamWConfig, params: &P) -> Self {
        let sizes: Vec<usize> = flatten(params).iter().map(Vec::len).collect();
        Self {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`.
    pub fn step<P: Parameterized<f32>>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let g = flatten(grads);
        if g.len() != self.m.len() || g.iter().zip(&self.m).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::shape("gradient layout does not match optimizer state"));
        }
        self.step += 1;
        let t = self.step as i32;
        let [b1, b2] = self.cfg.betas;
        let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let eps = self.cfg.eps;
        let mut rates = Vec::with_capacity(g.len());
        for ((gk, mk), vk) in g.iter().zip(&mut self.m).zip(&mut self.v) {
            let mut ratio = 0.0;
            for ((&gi, mi), vi) in gk.iter().zip(mk.iter_mut()).zip(vk.iter_mut()) {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                ratio += gi * gi / (vn / bc2).max(eps * eps);
            }
            let rms = if gk.is_empty() { 0.0 } else { (ratio / gk.len() as f64).sqrt() };
            rates.push(lr / (rms / self.cfg.clip_threshold).max(1.0));
        }
        let mut k = 0;
        let (m, v, wd) = (&self.m, &self.v, self.cfg.weight_decay);
        params.visit_mut("", &mut |_, mut p| {
            let rate = rates[k];
            let decay = 1.0 - rate * wd;
            let (mk, vk) = (&m[k], &v[k]);
            for ((pi, &mi), &vi) in p.iter_mut().zip(mk).zip(vk) {
                let update = (mi as f64 / bc1) / ((vi as f64 / bc2).sqrt() + eps);
                *pi = ((*pi as f64) * decay - rate * update) as f32;
            }
            k += 1;
        });
        Ok(())
    }

    /// Stores the moments as `optim.m.<i>` / `optim.v.<i>` plus the step count.
    pub fn save_into(&self, tf: &mut TensorFile) {
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            tf.push(format!("optim.m.{i}"), ArrayD::from_shape_vec(vec![m.len()], m.clone()).expect("1-D"));
            tf.push(format!("optim.v.{i}"), ArrayD::from_shape_vec(vec![v.len()], v.clone()).expect("1-D"));
        }
        // split so each half is exactly representable in f32
        let words = vec![(self.step >> 20) as f32, (self.step & 0xF_FFFF) as f32];
        tf.push("optim.step", ArrayD::from_shape_vec(vec![2], words).expect("two words"));
    }

    pub fn load_from(&mut self, tf: &mut TensorFile) -> Result<()> {
        let mut read = |name: String, expect: usize| -> Result<Vec<f32>> {
            let a = tf.take(&name)?;
            if a.shape() != [expect] {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}, expected [{expect}]", a.shape())));
            }
            Ok(a.iter().copied().collect())
        };
        for i in 0..self.m.len() {
            let n = self.m[i].len();
            self.m[i] = read(format!("optim.m.{i}"), n)?;
            self.v[i] = read(format!("optim.v.{i}"), n)?;
        }
        let s = read("optim.step".into(), 2)?;
        self.step = ((s[0] as u64) << 20) | s[1] as u64;
        Ok(())
    }
}

/// Elementwise `dst += src` over two modules with identical layouts.
pub fn accumulate<P: Parameterized<f32>>(dst: &mut P, src: &P) {
    let flat = flatten(src);
    let mut k = 0;
    dst.visit_mut("", &mut |_, mut d| {
        Zip::from(d.view_mut().into_shape_with_order(flat[k].len()).expect("contiguous"))
            .and(&ndarray::ArrayView1::from(&flat[k][..]))
            .for_each(|a, &b| *a += b);
        k += 1;
    });
}
