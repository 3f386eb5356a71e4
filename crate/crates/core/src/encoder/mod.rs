//! Frozen vision-transformer feature extraction.
//!
//! The encoder taps a fixed set of intermediate blocks, splits each tapped
//! output into its class token and patch tokens, and optionally recenters the
//! patch tokens on the class token of the same layer. Register tokens never
//! leave this module.

mod vit;
mod weights;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

pub use vit::{FrozenEncoder, VitBlock, VitWeights, ENCODER_MAGIC};
pub use weights::{toy_weights, ToyBackboneHook, ToyVitConfig, WeightHook, WeightResolver, CACHE_ENV};

use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub depth: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    /// Class token plus register tokens.
    pub num_prefix_tokens: usize,
    pub weight_id: String,
    /// Per-channel preprocessing statistics the backbone was trained with.
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 4 {
            return Err(Error::config(format!("encoder depth {} is below the minimum of 4", self.depth)));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("encoder embed_dim must be positive"));
        }
        if self.patch_size == 0 {
            return Err(Error::config("encoder patch_size must be positive"));
        }
        if self.num_prefix_tokens < 1 {
            return Err(Error::config("encoder needs a class token for recentering"));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("normalization std must be positive"));
        }
        Ok(())
    }

    pub fn num_registers(&self) -> usize {
        self.num_prefix_tokens - 1
    }

    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height % self.patch_size != 0 || width % self.patch_size != 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "image {height}x{width} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok((height / self.patch_size, width / self.patch_size))
    }
}

/// 1-based indices of the tapped encoder blocks, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerSelection {
    indices: Vec<usize>,
}

impl LayerSelection {
    pub fn new(indices: Vec<usize>, depth: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("layer selection is empty"));
        }
        if indices.iter().any(|&i| i == 0 || i > depth) {
            return Err(Error::config(format!("layer indices {indices:?} fall outside [1, {depth}]")));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("layer indices {indices:?} are not strictly increasing")));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn deepest(&self) -> usize {
        *self.indices.last().expect("non-empty selection")
    }
}

/// Default tapping policy: the middle eight blocks of a 12-block ViT, every
/// other block from 5 to 19 for a 24-block ViT. Other depths need `explicit`.
pub fn select_layers(spec: &EncoderSpec, explicit: Option<&[usize]>) -> Result<LayerSelection> {
    if let Some(list) = explicit {
        return LayerSelection::new(list.to_vec(), spec.depth);
    }
    let indices = match spec.depth {
        12 => (3..=10).collect(),
        24 => (5..=19).step_by(2).collect(),
        d => {
            return Err(Error::config(format!(
                "no built-in layer policy for depth {d}; supply encoder.layers explicitly"
            )))
        }
    };
    LayerSelection::new(indices, spec.depth)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub cls: Array1<f32>,
    /// `N × d`, row-major over the token grid.
    pub patches: Array2<f32>,
}

/// Tapped features of one image keyed by 1-based layer index.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub layers: BTreeMap<usize, LayerFeatures>,
    pub grid: (usize, usize),
    pub recentered: bool,
}

impl FeatureStack {
    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn dim(&self) -> usize {
        self.layers.values().next().map(|l| l.patches.ncols()).unwrap_or(0)
    }

    pub fn layer(&self, index: usize) -> Result<&LayerFeatures> {
        self.layers.get(&index).ok_or_else(|| Error::shape(format!("layer {index} missing from feature stack")))
    }

    /// Checks that every selected layer is present with a consistent shape.
    pub fn check(&self, selection: &LayerSelection) -> Result<()> {
        let n = self.num_tokens();
        let d = self.dim();
        for &i in selection.indices() {
            let l = self.layer(i)?;
            if l.patches.dim() != (n, d) || l.cls.len() != d {
                return Err(Error::shape(format!(
                    "layer {i} has patches {:?} and cls {} but expected ({n}, {d})",
                    l.patches.dim(),
                    l.cls.len()
                )));
            }
        }
        Ok(())
    }

    /// Patch tokens of `layers` summed elementwise.
    pub fn sum_patches(&self, layers: &[usize]) -> Result<Array2<f32>> {
        let mut acc = Array2::zeros((self.num_tokens(), self.dim()));
        for &i in layers {
            let l = self.layer(i)?;
            if l.patches.dim() != acc.dim() {
                return Err(Error::shape(format!("layer {i} shape {:?} != {:?}", l.patches.dim(), acc.dim())));
            }
            acc += &l.patches;
        }
        Ok(acc)
    }
}

fn shift(stack: &FeatureStack, sign: f32) -> FeatureStack {
    let layers = stack
        .layers
        .iter()
        .map(|(&i, l)| {
            let mut patches = l.patches.clone();
            for mut row in patches.outer_iter_mut() {
                row.scaled_add(sign, &l.cls);
            }
            (i, LayerFeatures { cls: l.cls.clone(), patches })
        })
        .collect();
    FeatureStack { layers, grid: stack.grid, recentered: sign < 0.0 }
}

/// Subtracts each layer's class token from every patch token of that layer.
pub fn recenter(stack: &FeatureStack) -> Result<FeatureStack> {
    if stack.recentered {
        return Err(Error::Argument("feature stack is already recentered".into()));
    }
    Ok(shift(stack, -1.0))
}

/// Inverse of [`recenter`].
pub fn uncenter(stack: &FeatureStack) -> Result<FeatureStack> {
    if !stack.recentered {
        return Err(Error::Argument("feature stack is not recentered".into()));
    }
    Ok(shift(stack, 1.0))
}

/// Applies per-channel `(x - mean) / std` to an `H × W × 3` image in place.
pub fn normalize_image(image: &mut Array3<f32>, mean: [f32; 3], std: [f32; 3]) {
    for c in 0..3 {
        image.index_axis_mut(ndarray::Axis(2), c).mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
}
