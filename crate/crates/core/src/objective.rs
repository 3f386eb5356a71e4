//! Grouped reconstruction targets and the cosine objectives.
//!
//! Decoder blocks are referred to by their index in block order (0 consumes
//! the bottleneck). A tapped layer at position `p` of the selection (0 being
//! the shallowest) is aligned with block `L_d - 1 - p`.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::decoder::DecodedStack;
use crate::encoder::{FeatureStack, LayerSelection};
use crate::error::{Error, Result};
use crate::nn::Scalar;

pub const COS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeMode {
    Layer2layerLast1,
    Layer2layerDense,
    Layer2layerSparse2,
    Layer2layerSparse4,
    Group1,
    Group2,
    Group4,
}

/// Matching lists of encoder layer sets and decoder block sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupingScheme {
    pub mode: SchemeMode,
    pub encoder_sets: Vec<Vec<usize>>,
    pub decoder_sets: Vec<Vec<usize>>,
}

impl GroupingScheme {
    /// Expands `mode` for the given selection and decoder depth.
    pub fn new(mode: SchemeMode, selection: &LayerSelection, num_blocks: usize) -> Result<Self> {
        let m = selection.len();
        if m != num_blocks {
            return Err(Error::config(format!(
                "{m} tapped layers cannot be aligned with {num_blocks} decoder blocks"
            )));
        }
        let layer = |p: usize| selection.indices()[p];
        let block = |p: usize| num_blocks - 1 - p;
        let pairs_every = |step: usize| -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
            (step - 1..m).step_by(step).map(|p| (vec![layer(p)], vec![block(p)])).unzip()
        };
        let groups = |count: usize| -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
            if m % count != 0 {
                return Err(Error::config(format!("{m} layers cannot be split into {count} equal groups")));
            }
            let size = m / count;
            Ok((0..count)
                .map(|g| {
                    let ps = g * size..(g + 1) * size;
                    (ps.clone().map(layer).collect(), ps.rev().map(block).collect())
                })
                .unzip())
        };
        let (encoder_sets, decoder_sets) = match mode {
            SchemeMode::Layer2layerLast1 => (vec![vec![selection.deepest()]], vec![vec![num_blocks - 1]]),
            SchemeMode::Layer2layerDense => pairs_every(1),
            SchemeMode::Layer2layerSparse2 => {
                require_multiple(m, 2)?;
                pairs_every(2)
            }
            SchemeMode::Layer2layerSparse4 => {
                require_multiple(m, 4)?;
                pairs_every(4)
            }
            SchemeMode::Group1 => groups(1)?,
            SchemeMode::Group2 => groups(2)?,
            SchemeMode::Group4 => groups(4)?,
        };
        let scheme = Self { mode, encoder_sets, decoder_sets };
        scheme.validate(selection, num_blocks)?;
        Ok(scheme)
    }

    pub fn num_groups(&self) -> usize {
        self.encoder_sets.len()
    }

    pub fn validate(&self, selection: &LayerSelection, num_blocks: usize) -> Result<()> {
        if self.encoder_sets.is_empty() || self.encoder_sets.len() != self.decoder_sets.len() {
            return Err(Error::config(format!(
                "grouping has {} encoder sets and {} decoder sets",
                self.encoder_sets.len(),
                self.decoder_sets.len()
            )));
        }
        let disjoint = |sets: &[Vec<usize>]| {
            let mut all: Vec<usize> = sets.concat();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            all.len() == n && sets.iter().all(|s| !s.is_empty())
        };
        if !disjoint(&self.encoder_sets) || !disjoint(&self.decoder_sets) {
            return Err(Error::config("grouping sets must be non-empty and pairwise disjoint"));
        }
        if let Some(l) = self.encoder_sets.iter().flatten().find(|l| !selection.indices().contains(l)) {
            return Err(Error::config(format!("grouping uses layer {l}, which is not tapped")));
        }
        if let Some(b) = self.decoder_sets.iter().flatten().find(|&&b| b >= num_blocks) {
            return Err(Error::config(format!("grouping uses decoder block {b} of {num_blocks}")));
        }
        Ok(())
    }
}

fn require_multiple(m: usize, step: usize) -> Result<()> {
    if m % step != 0 {
        return Err(Error::config(format!("{m} layers are not a multiple of the sparse step {step}")));
    }
    Ok(())
}

/// Per-group encoder targets `g_k` for one image, each `N × d`.
pub fn group_targets(stack: &FeatureStack, scheme: &GroupingScheme) -> Result<Vec<Array2<f32>>> {
    scheme.encoder_sets.iter().map(|set| stack.sum_patches(set)).collect()
}

/// Per-group reconstructions `ĝ_k`, each with the row count of the decoded stack.
pub fn group_reconstructions<F: Scalar>(decoded: &DecodedStack<F>, scheme: &GroupingScheme) -> Result<Vec<Array2<F>>> {
    scheme
        .decoder_sets
        .iter()
        .map(|set| {
            let first = decoded
                .layers
                .get(set[0])
                .ok_or_else(|| Error::config(format!("decoded stack has no block {}", set[0])))?;
            let mut acc = first.clone();
            for &b in &set[1..] {
                let l = decoded.layers.get(b).ok_or_else(|| Error::config(format!("decoded stack has no block {b}")))?;
                acc += l;
            }
            Ok(acc)
        })
        .collect()
}

/// One target/reconstruction pair; rows are the tokens of `batch` images in order.
#[derive(Clone, Debug)]
pub struct GroupPair<F> {
    pub target: Array2<F>,
    pub recon: Array2<F>,
}

/// Builds `(g_k, ĝ_k)` for a batch whose decoded stack concatenates the images' tokens.
pub fn build_groups(
    stacks: &[FeatureStack],
    decoded: &DecodedStack<f32>,
    scheme: &GroupingScheme,
) -> Result<Vec<GroupPair<f32>>> {
    let recons = group_reconstructions(decoded, scheme)?;
    let mut targets: Vec<Vec<Array2<f32>>> = vec![Vec::new(); scheme.num_groups()];
    for st in stacks {
        for (k, t) in group_targets(st, scheme)?.into_iter().enumerate() {
            targets[k].push(t);
        }
    }
    targets
        .into_iter()
        .zip(recons)
        .map(|(ts, recon)| {
            let views: Vec<_> = ts.iter().map(|t| t.view()).collect();
            let target = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
            if target.dim() != recon.dim() {
                return Err(Error::shape(format!("target {:?} vs reconstruction {:?}", target.dim(), recon.dim())));
            }
            Ok(GroupPair { target, recon })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LooseLossConfig {
    pub discard_rate_final: f64,
    pub warmup_iters: u64,
    pub grad_scale: f64,
}

impl Default for LooseLossConfig {
    fn default() -> Self {
        Self { discard_rate_final: 0.9, warmup_iters: 1000, grad_scale: 0.1 }
    }
}

impl LooseLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discard_rate_final) {
            return Err(Error::config("objective.loose.discard_rate_final must lie in [0, 1)"));
        }
        if !(self.grad_scale > 0.0 && self.grad_scale <= 1.0) {
            return Err(Error::config("objective.loose.grad_scale must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Fraction of easiest tokens whose gradient is damped at `iter`.
pub fn discard_rate(iter: u64, cfg: &LooseLossConfig) -> f64 {
    if cfg.warmup_iters == 0 || iter >= cfg.warmup_iters {
        return cfg.discard_rate_final;
    }
    iter as f64 / cfg.warmup_iters as f64 * cfg.discard_rate_final
}

/// Loss value plus `∂loss/∂ĝ_k` for every group.
#[derive(Clone, Debug)]
pub struct LossOutput<F> {
    pub loss: f64,
    pub recon_grads: Vec<Array2<F>>,
    /// Number of damped tokens per group.
    pub damped: Vec<usize>,
    /// Per-token flags per group, true where the gradient was damped.
    pub damped_mask: Vec<Vec<bool>>,
}

/// `1 - cos` of every row pair, with an epsilon-guarded denominator.
pub fn token_distances<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Vec<f64> {
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| {
            let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
            Zip::from(&x).and(&y).for_each(|&p, &q| {
                let (p, q) = (p.as_f64(), q.as_f64());
                dot += p * q;
                nx += p * p;
                ny += q * q;
            });
            1.0 - dot / (nx.sqrt() * ny.sqrt()).max(COS_EPS)
        })
        .collect()
}

/// Indices of the `floor(rate · n)` smallest distances; ties broken by index.
pub fn easiest_tokens(distances: &[f64], rate: f64) -> Vec<usize> {
    let count = ((rate * distances.len() as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&i, &j| distances[i].total_cmp(&distances[j]).then(i.cmp(&j)));
    order.truncate(count.min(distances.len()));
    order
}

fn global_cosine<F: Scalar>(
    pairs: &[GroupPair<F>],
    batch: usize,
    damping: Option<(f64, f64)>,
) -> Result<LossOutput<F>> {
    if pairs.is_empty() {
        return Err(Error::Argument("loss needs at least one group".into()));
    }
    if batch == 0 {
        return Err(Error::Argument("loss needs a non-empty batch".into()));
    }
    let groups = pairs.len() as f64;
    let mut out = LossOutput { loss: 0.0, recon_grads: Vec::new(), damped: Vec::new(), damped_mask: Vec::new() };
    for pair in pairs {
        let (rows, cols) = pair.target.dim();
        if pair.recon.dim() != (rows, cols) || rows % batch != 0 {
            return Err(Error::shape(format!(
                "pair shapes {:?}/{:?} do not split into {batch} samples",
                pair.target.dim(),
                pair.recon.dim()
            )));
        }
        let per = rows / batch;
        let mut grad = Array2::<F>::zeros((rows, cols));
        for b in 0..batch {
            let r = b * per..(b + 1) * per;
            let a = pair.target.slice(ndarray::s![r.clone(), ..]);
            let c = pair.recon.slice(ndarray::s![r.clone(), ..]);
            let (mut dot, mut na, mut nc) = (0.0, 0.0, 0.0);
            Zip::from(&a).and(&c).for_each(|&p, &q| {
                let (p, q) = (p.as_f64(), q.as_f64());
                dot += p * q;
                na += p * p;
                nc += q * q;
            });
            let (na, nc) = (na.sqrt(), nc.sqrt());
            let denom = na * nc;
            let cos = dot / denom.max(COS_EPS);
            out.loss += (1.0 - cos) / (groups * batch as f64);
            // d(-cos)/dc, scaled by the averaging weight
            let w = -1.0 / (groups * batch as f64);
            let (ca, cc) = if denom > COS_EPS { (1.0 / denom, -dot / (denom * nc * nc)) } else { (1.0 / COS_EPS, 0.0) };
            let (ca, cc) = (F::from_f64c(w * ca), F::from_f64c(w * cc));
            Zip::from(grad.slice_mut(ndarray::s![r, ..])).and(&a).and(&c).for_each(|g, &p, &q| *g = ca * p + cc * q);
        }
        let mut mask = vec![false; rows];
        if let Some((rate, scale)) = damping {
            let dist = token_distances(pair.target.view(), pair.recon.view());
            let s = F::from_f64c(scale);
            for i in easiest_tokens(&dist, rate) {
                mask[i] = true;
                grad.row_mut(i).mapv_inplace(|v| v * s);
            }
        }
        out.damped.push(mask.iter().filter(|&&m| m).count());
        out.damped_mask.push(mask);
        out.recon_grads.push(grad);
    }
    Ok(out)
}

/// Mean over groups and samples of the flattened cosine distance.
pub fn plain_cosine_loss<F: Scalar>(pairs: &[GroupPair<F>], batch: usize) -> Result<LossOutput<F>> {
    global_cosine(pairs, batch, None)
}

/// Same value as [`plain_cosine_loss`]; gradients of the batch's easiest
/// `discard_rate(iter)` fraction of tokens (per group) are scaled by `grad_scale`.
pub fn loose_loss<F: Scalar>(
    pairs: &[GroupPair<F>],
    batch: usize,
    iter: u64,
    cfg: &LooseLossConfig,
) -> Result<LossOutput<F>> {
    cfg.validate()?;
    global_cosine(pairs, batch, Some((discard_rate(iter, cfg), cfg.grad_scale)))
}

/// Spreads group gradients onto the decoder blocks that were summed into them.
pub fn block_gradients<F: Scalar>(
    scheme: &GroupingScheme,
    recon_grads: Vec<Array2<F>>,
    num_blocks: usize,
) -> Vec<Option<Array2<F>>> {
    let mut out: Vec<Option<Array2<F>>> = vec![None; num_blocks];
    for (set, g) in scheme.decoder_sets.iter().zip(recon_grads) {
        for &b in set {
            match &mut out[b] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g.clone()),
            }
        }
    }
    out
}
