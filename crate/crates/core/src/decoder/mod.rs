//! Reconstruction decoder: a stack of pre-norm transformer blocks whose
//! spatial mixer is linear attention by default.

mod attention;
mod conv;

pub use attention::{
    elu_plus_one, linear_attention, linear_attention_backward, linear_attention_weights, mean_row_entropy,
    softmax_attention, softmax_attention_backward, softmax_attention_weights,
};
pub use conv::DepthwiseConv;

use ndarray::{s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, join, LayerNorm, LayerNormCache, Linear, Parameterized, Scalar};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    LinearAttention,
    SoftmaxAttention,
    Conv1,
    Conv3,
    Conv5,
}

impl MixerKind {
    fn conv_size(self) -> Option<usize> {
        match self {
            MixerKind::Conv1 => Some(1),
            MixerKind::Conv3 => Some(3),
            MixerKind::Conv5 => Some(5),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    /// Filled from the encoder when zero.
    pub embed_dim: usize,
    /// Zero means `embed_dim / 64`.
    pub num_heads: usize,
    pub mixer: MixerKind,
    pub mlp_ratio: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { num_layers: 8, embed_dim: 0, num_heads: 0, mixer: MixerKind::LinearAttention, mlp_ratio: 4.0 }
    }
}

impl DecoderConfig {
    pub fn heads(&self) -> usize {
        if self.num_heads == 0 {
            (self.embed_dim / 64).max(1)
        } else {
            self.num_heads
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("decoder.num_layers must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("decoder.embed_dim must be positive"));
        }
        if self.embed_dim % self.heads() != 0 {
            return Err(Error::config(format!(
                "decoder.embed_dim {} is not divisible by {} heads",
                self.embed_dim,
                self.heads()
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config("decoder.mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// Multi-head attention mixer with fused QKV projection.
#[derive(Clone, Debug)]
pub struct AttentionMixer<F> {
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub heads: usize,
    pub linear: bool,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<F> {
    qkv: Array2<F>,
    ctx: Array2<F>,
}

impl<F: Scalar> AttentionMixer<F> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize, linear: bool) -> Self {
        Self {
            qkv: Linear::init(rng, dim, 3 * dim, INIT_STD),
            proj: Linear::init(rng, dim, dim, INIT_STD),
            heads,
            linear,
        }
    }

    fn dim(&self) -> usize {
        self.proj.in_dim()
    }

    fn head_slices<'a>(&self, qkv: &'a Array2<F>, b: usize, n: usize, h: usize) -> [ArrayView2<'a, F>; 3] {
        let d = self.dim();
        let dh = d / self.heads;
        let rows = b * n..(b + 1) * n;
        let c = h * dh;
        [
            qkv.slice(s![rows.clone(), c..c + dh]),
            qkv.slice(s![rows.clone(), d + c..d + c + dh]),
            qkv.slice(s![rows, 2 * d + c..2 * d + c + dh]),
        ]
    }

    pub fn forward(&self, x: ArrayView2<F>, n: usize) -> (Array2<F>, AttentionCache<F>) {
        let d = self.dim();
        let dh = d / self.heads;
        let qkv = self.qkv.forward(x);
        let mut ctx = Array2::zeros((x.nrows(), d));
        for b in 0..x.nrows() / n {
            for h in 0..self.heads {
                let [q, k, v] = self.head_slices(&qkv, b, n, h);
                let o = if self.linear { linear_attention(q, k, v) } else { softmax_attention(q, k, v) };
                ctx.slice_mut(s![b * n..(b + 1) * n, h * dh..(h + 1) * dh]).assign(&o);
            }
        }
        let out = self.proj.forward(ctx.view());
        (out, AttentionCache { qkv, ctx })
    }

    pub fn backward(
        &self,
        x: ArrayView2<F>,
        n: usize,
        cache: &AttentionCache<F>,
        dout: ArrayView2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        let d = self.dim();
        let dh = d / self.heads;
        let dctx = self.proj.backward(cache.ctx.view(), dout, &mut grad.proj);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for b in 0..x.nrows() / n {
            let rows = b * n..(b + 1) * n;
            for h in 0..self.heads {
                let [q, k, v] = self.head_slices(&cache.qkv, b, n, h);
                let g = dctx.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let (dq, dk, dv) = if self.linear {
                    linear_attention_backward(q, k, v, g)
                } else {
                    softmax_attention_backward(q, k, v, g)
                };
                let c = h * dh;
                dqkv.slice_mut(s![rows.clone(), c..c + dh]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), d + c..d + c + dh]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * d + c..2 * d + c + dh]).assign(&dv);
            }
        }
        self.qkv.backward(x, dqkv.view(), &mut grad.qkv)
    }

    /// Row-stochastic attention weights per (sample, head).
    pub fn weights(&self, x: ArrayView2<F>, n: usize) -> Vec<Array2<F>> {
        let qkv = self.qkv.forward(x);
        let mut out = Vec::new();
        for b in 0..x.nrows() / n {
            for h in 0..self.heads {
                let [q, k, _] = self.head_slices(&qkv, b, n, h);
                out.push(if self.linear { linear_attention_weights(q, k) } else { softmax_attention_weights(q, k) });
            }
        }
        out
    }
}

impl<F: Scalar> Parameterized<F> for AttentionMixer<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Depthwise convolution followed by a pointwise projection.
#[derive(Clone, Debug)]
pub struct ConvMixer<F> {
    pub depthwise: DepthwiseConv<F>,
    pub proj: Linear<F>,
}

#[derive(Clone, Debug)]
pub enum Mixer<F> {
    Attention(AttentionMixer<F>),
    Conv(ConvMixer<F>),
}

#[derive(Clone, Debug)]
pub enum MixerCache<F> {
    Attention(AttentionCache<F>),
    Conv(Array2<F>),
}

impl<F: Scalar> Mixer<F> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, kind: MixerKind, dim: usize, heads: usize) -> Self {
        match kind.conv_size() {
            Some(k) => Mixer::Conv(ConvMixer {
                depthwise: DepthwiseConv::init(rng, k, dim, INIT_STD),
                proj: Linear::init(rng, dim, dim, INIT_STD),
            }),
            None => Mixer::Attention(AttentionMixer::init(rng, dim, heads, kind == MixerKind::LinearAttention)),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>, grid: (usize, usize)) -> (Array2<F>, MixerCache<F>) {
        match self {
            Mixer::Attention(a) => {
                let (y, c) = a.forward(x, grid.0 * grid.1);
                (y, MixerCache::Attention(c))
            }
            Mixer::Conv(c) => {
                let mid = c.depthwise.forward(x, grid);
                (c.proj.forward(mid.view()), MixerCache::Conv(mid))
            }
        }
    }

    pub fn backward(
        &self,
        x: ArrayView2<F>,
        grid: (usize, usize),
        cache: &MixerCache<F>,
        dout: ArrayView2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        match (self, cache, grad) {
            (Mixer::Attention(a), MixerCache::Attention(c), Mixer::Attention(g)) => {
                a.backward(x, grid.0 * grid.1, c, dout, g)
            }
            (Mixer::Conv(m), MixerCache::Conv(mid), Mixer::Conv(g)) => {
                let dmid = m.proj.backward(mid.view(), dout, &mut g.proj);
                m.depthwise.backward(x, dmid.view(), grid, &mut g.depthwise)
            }
            _ => unreachable!("mixer, cache and gradient variants always agree"),
        }
    }

    fn output_projection_mut(&mut self) -> &mut Linear<F> {
        match self {
            Mixer::Attention(a) => &mut a.proj,
            Mixer::Conv(c) => &mut c.proj,
        }
    }
}

impl<F: Scalar> Parameterized<F> for Mixer<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        match self {
            Mixer::Attention(a) => a.visit(&join(prefix, "attn"), f),
            Mixer::Conv(c) => {
                c.depthwise.visit(&join(prefix, "dwconv"), f);
                c.proj.visit(&join(prefix, "proj"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        match self {
            Mixer::Attention(a) => a.visit_mut(&join(prefix, "attn"), f),
            Mixer::Conv(c) => {
                c.depthwise.visit_mut(&join(prefix, "dwconv"), f);
                c.proj.visit_mut(&join(prefix, "proj"), f);
            }
        }
    }
}

/// Pre-norm block: `x + mixer(norm(x))` then `x + mlp(norm(x))`.
#[derive(Clone, Debug)]
pub struct Block<F> {
    pub norm1: LayerNorm<F>,
    pub mixer: Mixer<F>,
    pub norm2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    h1: Array2<F>,
    mixer: MixerCache<F>,
    ln2: LayerNormCache<F>,
    h2: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
}

impl<F: Scalar> Block<F> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &DecoderConfig) -> Self {
        let d = cfg.embed_dim;
        let hidden = (d as f64 * cfg.mlp_ratio).round() as usize;
        Self {
            norm1: LayerNorm::new(d, LN_EPS),
            mixer: Mixer::init(rng, cfg.mixer, d, cfg.heads()),
            norm2: LayerNorm::new(d, LN_EPS),
            fc1: Linear::init(rng, d, hidden, INIT_STD),
            fc2: Linear::init(rng, hidden, d, INIT_STD),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>, grid: (usize, usize)) -> (Array2<F>, BlockCache<F>) {
        let (h1, ln1) = self.norm1.forward(x);
        let (m, mixer) = self.mixer.forward(h1.view(), grid);
        let x1 = &x + &m;
        let (h2, ln2) = self.norm2.forward(x1.view());
        let pre_act = self.fc1.forward(h2.view());
        let act = gelu(pre_act.view());
        let out = x1 + self.fc2.forward(act.view());
        (out, BlockCache { ln1, h1, mixer, ln2, h2, pre_act, act })
    }

    pub fn backward(&self, grid: (usize, usize), cache: &BlockCache<F>, dout: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        let dact = self.fc2.backward(cache.act.view(), dout, &mut grad.fc2);
        let dpre = gelu_backward(cache.pre_act.view(), dact.view());
        let dh2 = self.fc1.backward(cache.h2.view(), dpre.view(), &mut grad.fc1);
        let mut dx1 = self.norm2.backward(&cache.ln2, dh2.view(), &mut grad.norm2);
        dx1 += &dout;
        let dh1 = self.mixer.backward(cache.h1.view(), grid, &cache.mixer, dx1.view(), &mut grad.mixer);
        let mut dx = self.norm1.backward(&cache.ln1, dh1.view(), &mut grad.norm1);
        dx += &dx1;
        dx
    }
}

impl<F: Scalar> Parameterized<F> for Block<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.mixer.visit(&join(prefix, "mixer"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.mixer.visit_mut(&join(prefix, "mixer"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Outputs of every decoder block, in block order.
///
/// Block 0 consumes the bottleneck output, so it sits furthest from the input
/// features and reconstructs the deepest tapped encoder layer; the last block
/// reconstructs the shallowest.
#[derive(Clone, Debug)]
pub struct DecodedStack<F> {
    pub layers: Vec<Array2<F>>,
}

impl<F: Scalar> DecodedStack<F> {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Output aligned with the `position`-th tapped encoder layer (0 = shallowest).
    pub fn aligned(&self, position: usize) -> &Array2<F> {
        &self.layers[self.layers.len() - 1 - position]
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<F> {
    pub blocks: Vec<Block<F>>,
}

impl<F: Scalar> Decoder<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { blocks: (0..cfg.num_layers).map(|_| Block::init(rng, cfg)).collect() })
    }

    /// Zero the mixer and MLP output projections so every block is an identity map.
    pub fn zero_output_projections(&mut self) {
        for b in &mut self.blocks {
            let p = b.mixer.output_projection_mut();
            p.weight.fill(F::zero());
            p.bias.fill(F::zero());
            b.fc2.weight.fill(F::zero());
            b.fc2.bias.fill(F::zero());
        }
    }

    pub fn decode(&self, z: ArrayView2<F>, grid: (usize, usize)) -> DecodedStack<F> {
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut x = z.to_owned();
        for b in &self.blocks {
            x = b.forward(x.view(), grid).0;
            layers.push(x.clone());
        }
        DecodedStack { layers }
    }

    pub fn forward_train(&self, z: ArrayView2<F>, grid: (usize, usize)) -> (DecodedStack<F>, Vec<BlockCache<F>>) {
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = z.to_owned();
        for b in &self.blocks {
            let (y, c) = b.forward(x.view(), grid);
            caches.push(c);
            layers.push(y.clone());
            x = y;
        }
        (DecodedStack { layers }, caches)
    }

    /// Backpropagates gradients injected at any subset of block outputs.
    pub fn backward(
        &self,
        grid: (usize, usize),
        caches: &[BlockCache<F>],
        output_grads: &[Option<Array2<F>>],
        grad: &mut Self,
    ) -> Array2<F> {
        assert_eq!(output_grads.len(), self.blocks.len());
        let mut carry: Option<Array2<F>> = None;
        for j in (0..self.blocks.len()).rev() {
            let dout = match (carry.take(), &output_grads[j]) {
                (Some(mut c), Some(g)) => {
                    c += g;
                    c
                }
                (Some(c), None) => c,
                (None, Some(g)) => g.clone(),
                (None, None) => continue,
            };
            carry = Some(self.blocks[j].backward(grid, &caches[j], dout.view(), &mut grad.blocks[j]));
        }
        let rows = caches.first().map(|c| c.h1.nrows()).unwrap_or(0);
        let cols = caches.first().map(|c| c.h1.ncols()).unwrap_or(0);
        carry.unwrap_or_else(|| Array2::zeros((rows, cols)))
    }

    /// Attention weights of one block for every (sample, head); `None` for conv mixers.
    pub fn attention_weights(&self, z: ArrayView2<F>, grid: (usize, usize), block: usize) -> Option<Vec<Array2<F>>> {
        let mut x = z.to_owned();
        for b in &self.blocks[..block] {
            x = b.forward(x.view(), grid).0;
        }
        let blk = &self.blocks[block];
        match &blk.mixer {
            Mixer::Attention(a) => Some(a.weights(blk.norm1.apply(x.view()).view(), grid.0 * grid.1)),
            Mixer::Conv(_) => None,
        }
    }
}

impl<F: Scalar> Parameterized<F> for Decoder<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mixer: MixerKind) -> DecoderConfig {
        DecoderConfig { num_layers: 2, embed_dim: 8, num_heads: 2, mixer, mlp_ratio: 2.0 }
    }

    #[test]
    fn eight_blocks_yield_eight_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = DecoderConfig { embed_dim: 64, ..DecoderConfig::default() };
        let dec = Decoder::<f32>::new(&mut rng, &c).unwrap();
        let z: Array2<f32> = trunc_normal(&mut rng, (16, 64), 1.0);
        let out = dec.decode(z.view(), (4, 4));
        assert_eq!(out.len(), 8);
        assert!(out.layers.iter().all(|l| l.dim() == (16, 64)));
        let again = dec.decode(z.view(), (4, 4));
        assert!(out.layers.iter().zip(&again.layers).all(|(a, b)| a == b));
    }

    #[test]
    fn zero_projections_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dec = Decoder::<f64>::new(&mut rng, &cfg(MixerKind::LinearAttention)).unwrap();
        dec.zero_output_projections();
        let z: Array2<f64> = trunc_normal(&mut rng, (8, 8), 1.0);
        for l in dec.decode(z.view(), (2, 2)).layers {
            assert_eq!(l, z);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let c = DecoderConfig { embed_dim: 10, num_heads: 3, ..DecoderConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    fn check_full_gradient(mixer: MixerKind) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cfg(mixer);
        let dec = Decoder::<f64>::new(&mut rng, &c).unwrap();
        let mut dec = dec;
        // larger weights make the check sensitive
        dec.visit_mut("", &mut |_, mut v| v.mapv_inplace(|x| x * 20.0 + 0.01));
        let grid = (2, 2);
        let z: Array2<f64> = trunc_normal(&mut rng, (8, 8), 1.0);
        let w0: Array2<f64> = trunc_normal(&mut rng, (8, 8), 1.0);
        let w1: Array2<f64> = trunc_normal(&mut rng, (8, 8), 1.0);
        let loss = |d: &Decoder<f64>, z: &Array2<f64>| {
            let o = d.decode(z.view(), grid);
            (&o.layers[0] * &w0).sum() + (&o.layers[1] * &w1).sum()
        };
        let (_, caches) = dec.forward_train(z.view(), grid);
        let mut g = dec.zeroed();
        let dz = dec.backward(grid, &caches, &[Some(w0.clone()), Some(w1.clone())], &mut g);
        let h = 1e-6;
        for (i, j) in [(0, 0), (3, 5), (7, 7)] {
            let mut zp = z.clone();
            zp[[i, j]] += h;
            let mut zm = z.clone();
            zm[[i, j]] -= h;
            let fd = (loss(&dec, &zp) - loss(&dec, &zm)) / (2.0 * h);
            assert!((fd - dz[[i, j]]).abs() <= 1e-5 * fd.abs().max(1.0), "{mixer:?} dz {fd} vs {}", dz[[i, j]]);
        }
        let mut analytic = Vec::new();
        g.visit("", &mut |n, v| analytic.push((n, v.iter().copied().collect::<Vec<_>>())));
        for (pi, (name, vals)) in analytic.iter().enumerate() {
            let idx = vals.len() / 2;
            let perturbed = |delta: f64| {
                let mut d = dec.clone();
                let mut k = 0;
                d.visit_mut("", &mut |_, mut v| {
                    if k == pi {
                        let flat = v.as_slice_mut().unwrap();
                        flat[idx] += delta;
                    }
                    k += 1;
                });
                loss(&d, &z)
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            assert!(
                (fd - vals[idx]).abs() <= 1e-5 * fd.abs().max(1.0),
                "{mixer:?} {name}: {fd} vs {}",
                vals[idx]
            );
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        for m in [MixerKind::LinearAttention, MixerKind::SoftmaxAttention, MixerKind::Conv3] {
            check_full_gradient(m);
        }
    }
}
