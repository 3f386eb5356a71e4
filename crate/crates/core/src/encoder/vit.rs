use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use serde_json::json;

use super::{EncoderSpec, FeatureStack, LayerFeatures, LayerSelection};
use crate::container::TensorFile;
use crate::decoder::AttentionMixer;
use crate::error::{Error, Result};
use crate::nn::{gelu_erf, join, LayerNorm, Linear, Parameterized};

pub const ENCODER_MAGIC: &[u8; 4] = b"DLWT";

#[derive(Clone, Debug)]
pub struct VitBlock {
    pub norm1: LayerNorm<f32>,
    pub attn: AttentionMixer<f32>,
    pub ls1: Array1<f32>,
    pub norm2: LayerNorm<f32>,
    pub fc1: Linear<f32>,
    pub fc2: Linear<f32>,
    pub ls2: Array1<f32>,
}

impl VitBlock {
    fn zeros(dim: usize, heads: usize, hidden: usize, eps: f64) -> Self {
        Self {
            norm1: LayerNorm::new(dim, eps),
            attn: AttentionMixer { qkv: Linear::zeros(dim, 3 * dim), proj: Linear::zeros(dim, dim), heads, linear: false },
            ls1: Array1::ones(dim),
            norm2: LayerNorm::new(dim, eps),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
            ls2: Array1::ones(dim),
        }
    }

    fn forward(&self, x: &mut Array2<f32>, tokens: usize) {
        let h = self.norm1.apply(x.view());
        let (a, _) = self.attn.forward(h.view(), tokens);
        *x += &(a * &self.ls1);
        let h = self.norm2.apply(x.view());
        let m = self.fc2.forward(gelu_erf(self.fc1.forward(h.view()).view()).view());
        *x += &(m * &self.ls2);
    }
}

impl Parameterized<f32> for VitBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f32>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        f(join(prefix, "ls1"), self.ls1.view().into_dyn());
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
        f(join(prefix, "ls2"), self.ls2.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f32>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        f(join(prefix, "ls1"), self.ls1.view_mut().into_dyn());
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
        f(join(prefix, "ls2"), self.ls2.view_mut().into_dyn());
    }
}

/// Parameters of a ViT with class token, optional registers and LayerScale.
#[derive(Clone, Debug)]
pub struct VitWeights {
    pub patch_size: usize,
    /// `(3·p·p) × d`; input vectors are channel-major, then row, then column.
    pub patch_embed: Linear<f32>,
    pub cls_token: Array1<f32>,
    pub register_tokens: Array2<f32>,
    /// Row 0 belongs to the class token, the rest to a `pos_grid` of patches.
    pub pos_embed: Array2<f32>,
    pub pos_grid: (usize, usize),
    pub blocks: Vec<VitBlock>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub ln_eps: f64,
}

impl VitWeights {
    /// All-zero weights with the given architecture, ready to be filled.
    #[allow(clippy::too_many_arguments)]
    pub fn zeros(
        depth: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        patch: usize,
        registers: usize,
        pos_grid: (usize, usize),
        ln_eps: f64,
    ) -> Self {
        Self {
            patch_size: patch,
            patch_embed: Linear::zeros(3 * patch * patch, dim),
            cls_token: Array1::zeros(dim),
            register_tokens: Array2::zeros((registers, dim)),
            pos_embed: Array2::zeros((1 + pos_grid.0 * pos_grid.1, dim)),
            pos_grid,
            blocks: (0..depth).map(|_| VitBlock::zeros(dim, heads, hidden, ln_eps)).collect(),
            mean: super::IMAGENET_MEAN,
            std: super::IMAGENET_STD,
            ln_eps,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.cls_token.len()
    }

    pub fn heads(&self) -> usize {
        self.blocks.first().map(|b| b.attn.heads).unwrap_or(1)
    }

    fn meta(&self) -> serde_json::Value {
        json!({
            "depth": self.depth(),
            "embed_dim": self.dim(),
            "num_heads": self.heads(),
            "mlp_hidden": self.blocks.first().map(|b| b.fc1.out_dim()).unwrap_or(0),
            "patch_size": self.patch_size,
            "num_registers": self.register_tokens.nrows(),
            "pos_grid": [self.pos_grid.0, self.pos_grid.1],
            "mean": self.mean,
            "std": self.std,
            "ln_eps": self.ln_eps,
        })
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut tf = TensorFile::new(self.meta());
        self.visit("", &mut |name, v| tf.push(name, v.to_owned()));
        tf
    }

    pub fn from_tensor_file(mut tf: TensorFile) -> Result<Self> {
        let m = &tf.meta;
        let get = |k: &str| -> Result<usize> {
            m.get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("encoder meta lacks `{k}`")))
        };
        let grid = m
            .get("pos_grid")
            .and_then(|v| v.as_array())
            .filter(|a| a.len() == 2)
            .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
            .ok_or_else(|| Error::Checkpoint("encoder meta lacks `pos_grid`".into()))?;
        let triple = |k: &str, default: [f32; 3]| -> [f32; 3] {
            m.get(k)
                .and_then(|v| serde_json::from_value::<[f32; 3]>(v.clone()).ok())
                .unwrap_or(default)
        };
        let mut w = VitWeights::zeros(
            get("depth")?,
            get("embed_dim")?,
            get("num_heads")?,
            get("mlp_hidden")?,
            get("patch_size")?,
            get("num_registers")?,
            grid,
            m.get("ln_eps").and_then(|v| v.as_f64()).unwrap_or(1e-6),
        );
        w.mean = triple("mean", super::IMAGENET_MEAN);
        w.std = triple("std", super::IMAGENET_STD);
        for b in &mut w.blocks {
            b.norm1.eps = w.ln_eps;
            b.norm2.eps = w.ln_eps;
        }
        let mut failure = None;
        w.visit_mut("", &mut |name, mut dst| {
            if failure.is_some() {
                return;
            }
            match tf.take(&name) {
                Ok(src) if src.shape() == dst.shape() => dst.assign(&src),
                Ok(src) => {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        dst.shape()
                    )))
                }
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(w),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().save(ENCODER_MAGIC, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(TensorFile::load(ENCODER_MAGIC, path)?)
    }

    /// Patch position embeddings resampled (bilinear, half-pixel centres) to `grid`.
    fn patch_positions(&self, grid: (usize, usize)) -> Array2<f32> {
        let src = self.pos_embed.slice(s![1.., ..]);
        if grid == self.pos_grid {
            return src.to_owned();
        }
        let (sh, sw) = self.pos_grid;
        let (th, tw) = grid;
        let d = self.dim();
        let mut out = Array2::zeros((th * tw, d));
        let coord = |i: usize, t: usize, s: usize| -> (usize, usize, f32) {
            let x = ((i as f32 + 0.5) * s as f32 / t as f32 - 0.5).clamp(0.0, (s - 1) as f32);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(s - 1);
            (lo, hi, x - lo as f32)
        };
        for r in 0..th {
            let (r0, r1, fr) = coord(r, th, sh);
            for c in 0..tw {
                let (c0, c1, fc) = coord(c, tw, sw);
                let mut row = out.row_mut(r * tw + c);
                for (idx, wgt) in [
                    (r0 * sw + c0, (1.0 - fr) * (1.0 - fc)),
                    (r0 * sw + c1, (1.0 - fr) * fc),
                    (r1 * sw + c0, fr * (1.0 - fc)),
                    (r1 * sw + c1, fr * fc),
                ] {
                    row.scaled_add(wgt, &src.row(idx));
                }
            }
        }
        out
    }
}

impl Parameterized<f32> for VitWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f32>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cls_token"), self.cls_token.view().into_dyn());
        f(join(prefix, "register_tokens"), self.register_tokens.view().into_dyn());
        f(join(prefix, "pos_embed"), self.pos_embed.view().into_dyn());
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f32>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cls_token"), self.cls_token.view_mut().into_dyn());
        f(join(prefix, "register_tokens"), self.register_tokens.view_mut().into_dyn());
        f(join(prefix, "pos_embed"), self.pos_embed.view_mut().into_dyn());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

/// A pretrained ViT used strictly for inference.
///
/// There is no mutable access to the weights once constructed.
#[derive(Debug)]
pub struct FrozenEncoder {
    spec: EncoderSpec,
    weights: VitWeights,
}

impl FrozenEncoder {
    /// Builds the encoder, deriving the spec from the weights.
    pub fn new(weight_id: impl Into<String>, weights: VitWeights) -> Result<Self> {
        let spec = EncoderSpec {
            depth: weights.depth(),
            embed_dim: weights.dim(),
            patch_size: weights.patch_size,
            num_prefix_tokens: 1 + weights.register_tokens.nrows(),
            weight_id: weight_id.into(),
            mean: weights.mean,
            std: weights.std,
        };
        spec.validate()?;
        Ok(Self { spec, weights })
    }

    /// Builds the encoder and checks that `expected` agrees with the weights.
    pub fn with_spec(expected: &EncoderSpec, weights: VitWeights) -> Result<Self> {
        let enc = Self::new(expected.weight_id.clone(), weights)?;
        let got = &enc.spec;
        if (got.depth, got.embed_dim, got.patch_size, got.num_prefix_tokens)
            != (expected.depth, expected.embed_dim, expected.patch_size, expected.num_prefix_tokens)
        {
            return Err(Error::Load {
                id: expected.weight_id.clone(),
                reason: format!("weights describe {got:?}, configuration expects {expected:?}"),
            });
        }
        Ok(enc)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn checksum(&self) -> String {
        self.weights.checksum()
    }

    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.spec.grid_for(height, width)
    }

    fn embed(&self, image: &Array3<f32>) -> Result<(Array2<f32>, (usize, usize))> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let grid = self.grid_for(h, w)?;
        let p = self.spec.patch_size;
        let n = grid.0 * grid.1;
        let mut patches = Array2::zeros((n, 3 * p * p));
        for gr in 0..grid.0 {
            for gc in 0..grid.1 {
                let mut row = patches.row_mut(gr * grid.1 + gc);
                let mut k = 0;
                for ch in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            row[k] = image[[gr * p + y, gc * p + x, ch]];
                            k += 1;
                        }
                    }
                }
            }
        }
        let wts = &self.weights;
        let mut emb = wts.patch_embed.forward(patches.view());
        emb += &wts.patch_positions(grid);
        let prefix = 1 + wts.register_tokens.nrows();
        let d = self.spec.embed_dim;
        let mut tokens = Array2::zeros((prefix + n, d));
        let mut cls = tokens.row_mut(0);
        cls.assign(&wts.cls_token);
        cls += &wts.pos_embed.row(0);
        tokens.slice_mut(s![1..prefix, ..]).assign(&wts.register_tokens);
        tokens.slice_mut(s![prefix.., ..]).assign(&emb);
        Ok((tokens, grid))
    }

    /// Runs a batch of normalized `H × W × 3` images through the backbone.
    pub fn extract_batch(&self, images: &[Array3<f32>], selection: &LayerSelection) -> Result<Vec<FeatureStack>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        if selection.deepest() > self.spec.depth {
            return Err(Error::config(format!(
                "layer {} exceeds encoder depth {}",
                selection.deepest(),
                self.spec.depth
            )));
        }
        let mut embedded = Vec::with_capacity(images.len());
        let mut grid = None;
        for img in images {
            let (t, g) = self.embed(img)?;
            if *grid.get_or_insert(g) != g {
                return Err(Error::shape("images in one batch must share a size"));
            }
            embedded.push(t);
        }
        let grid = grid.expect("non-empty batch");
        let per = embedded[0].nrows();
        let views: Vec<ArrayView2<f32>> = embedded.iter().map(|t| t.view()).collect();
        let mut x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        let prefix = self.spec.num_prefix_tokens;
        let mut stacks: Vec<BTreeMap<usize, LayerFeatures>> = vec![BTreeMap::new(); images.len()];
        for (i, block) in self.weights.blocks.iter().enumerate().take(selection.deepest()) {
            block.forward(&mut x, per);
            let layer = i + 1;
            if selection.indices().contains(&layer) {
                for (b, st) in stacks.iter_mut().enumerate() {
                    let base = b * per;
                    st.insert(
                        layer,
                        LayerFeatures {
                            cls: x.row(base).to_owned(),
                            patches: x.slice(s![base + prefix..base + per, ..]).to_owned(),
                        },
                    );
                }
            }
        }
        Ok(stacks.into_iter().map(|layers| FeatureStack { layers, grid, recentered: false }).collect())
    }

    pub fn extract(&self, image: &Array3<f32>, selection: &LayerSelection) -> Result<FeatureStack> {
        Ok(self.extract_batch(std::slice::from_ref(image), selection)?.remove(0))
    }
}
