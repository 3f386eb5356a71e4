//! The full detector: frozen encoder, trainable bottleneck and decoder.

use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bottleneck::{aggregate, NoisyBottleneck};
use crate::decoder::Decoder;
use crate::encoder::{recenter, select_layers, FrozenEncoder, LayerSelection};
use crate::error::{Error, Result};
use crate::nn::{join, Parameterized};
use crate::objective::{
    block_gradients, group_reconstructions, group_targets, loose_loss, plain_cosine_loss, GroupPair, GroupingScheme,
    LooseLossConfig,
};
use crate::runtime::config::{LossKind, RunConfig};
use crate::scoring::{anomaly_map, AnomalyMap, ScoringConfig};

/// Everything the optimizer may touch. The encoder is not part of it.
#[derive(Clone, Debug)]
pub struct Trainable {
    pub bottleneck: NoisyBottleneck<f32>,
    pub decoder: Decoder<f32>,
}

impl Parameterized<f32> for Trainable {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f32>)) {
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f32>)) {
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Encoder-side quantities of one image: bottleneck input and group targets.
///
/// They depend only on the frozen encoder, so they can be cached across iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub z0: Array2<f32>,
    pub targets: Vec<Array2<f32>>,
    pub grid: (usize, usize),
}

/// Loss statistics of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub damped: Vec<usize>,
}

pub struct Model {
    pub encoder: Arc<FrozenEncoder>,
    pub selection: LayerSelection,
    pub scheme: GroupingScheme,
    pub recenter: bool,
    pub trainable: Trainable,
}

impl Model {
    /// Initializes the trainable parts from `cfg.train.seed`.
    pub fn new(encoder: Arc<FrozenEncoder>, cfg: &RunConfig) -> Result<Self> {
        let selection = select_layers(encoder.spec(), cfg.encoder.layers.as_deref())?;
        let d = encoder.spec().embed_dim;
        let mut dcfg = cfg.decoder.clone();
        if dcfg.embed_dim == 0 {
            dcfg.embed_dim = d;
        } else if dcfg.embed_dim != d {
            return Err(Error::config(format!("decoder.embed_dim {} differs from encoder width {d}", dcfg.embed_dim)));
        }
        if dcfg.num_layers != selection.len() {
            return Err(Error::config(format!(
                "decoder.num_layers {} must equal the number of tapped encoder layers {}",
                dcfg.num_layers,
                selection.len()
            )));
        }
        let scheme = GroupingScheme::new(cfg.objective.scheme, &selection, dcfg.num_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let bottleneck = NoisyBottleneck::new(&mut rng, d, cfg.bottleneck.clone())?;
        let decoder = Decoder::new(&mut rng, &dcfg)?;
        Ok(Self { encoder, selection, scheme, recenter: cfg.encoder.recenter, trainable: Trainable { bottleneck, decoder } })
    }

    /// Runs the encoder on normalized images and derives `z0` and the group targets.
    pub fn prepare(&self, images: &[Array3<f32>]) -> Result<Vec<Prepared>> {
        let stacks = self.encoder.extract_batch(images, &self.selection)?;
        stacks
            .into_iter()
            .map(|st| {
                let st = if self.recenter { recenter(&st)? } else { st };
                Ok(Prepared {
                    z0: aggregate(&st, &self.selection)?.tokens,
                    targets: group_targets(&st, &self.scheme)?,
                    grid: st.grid,
                })
            })
            .collect()
    }

    fn stack_batch(batch: &[&Prepared]) -> Result<(Array2<f32>, Vec<Array2<f32>>, (usize, usize))> {
        let first = batch.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
        if batch.iter().any(|p| p.grid != first.grid) {
            return Err(Error::shape("images in one batch must share a token grid"));
        }
        let cat = |f: &dyn Fn(&Prepared) -> &Array2<f32>| -> Result<Array2<f32>> {
            let views: Vec<_> = batch.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
        };
        let z = cat(&|p| &p.z0)?;
        let targets = (0..first.targets.len()).map(|k| cat(&|p| &p.targets[k])).collect::<Result<_>>()?;
        Ok((z, targets, first.grid))
    }

    /// Loss and parameter gradients for one batch with train-time noise drawn from `noise_seed`.
    pub fn gradients(
        &self,
        batch: &[&Prepared],
        iter: u64,
        noise_seed: u64,
        loss: LossKind,
        loose: &LooseLossConfig,
    ) -> Result<(StepStats, Trainable)> {
        let (z, targets, grid) = Self::stack_batch(batch)?;
        let t = &self.trainable;
        let (bz, bcache) = t.bottleneck.forward_train(z.view(), noise_seed)?;
        let (decoded, dcaches) = t.decoder.forward_train(bz.view(), grid);
        let recons = group_reconstructions(&decoded, &self.scheme)?;
        let pairs: Vec<GroupPair<f32>> =
            targets.into_iter().zip(recons).map(|(target, recon)| GroupPair { target, recon }).collect();
        let out = match loss {
            LossKind::Loose => loose_loss(&pairs, batch.len(), iter, loose)?,
            LossKind::Plain => plain_cosine_loss(&pairs, batch.len())?,
        };
        let mut grads = Trainable { bottleneck: t.bottleneck.zeroed(), decoder: t.decoder.zeroed() };
        let block_grads = block_gradients(&self.scheme, out.recon_grads, t.decoder.blocks.len());
        let dz = t.decoder.backward(grid, &dcaches, &block_grads, &mut grads.decoder);
        t.bottleneck.backward(&bcache, dz.view(), &mut grads.bottleneck, false);
        Ok((StepStats { loss: out.loss, damped: out.damped }, grads))
    }

    /// Eval-mode `(target, reconstruction)` pairs per image, one entry per group.
    pub fn reconstruct(&self, batch: &[&Prepared]) -> Result<Vec<Vec<(Array2<f32>, Array2<f32>)>>> {
        let (z, targets, grid) = Self::stack_batch(batch)?;
        let n = grid.0 * grid.1;
        let bz = self.trainable.bottleneck.forward(z.view(), false, 0)?;
        let decoded = self.trainable.decoder.decode(bz.view(), grid);
        let recons = group_reconstructions(&decoded, &self.scheme)?;
        Ok((0..batch.len())
            .map(|b| {
                let rows = s![b * n..(b + 1) * n, ..];
                targets.iter().zip(&recons).map(|(t, r)| (t.slice(rows).to_owned(), r.slice(rows).to_owned())).collect()
            })
            .collect())
    }

    /// Anomaly maps at each image's input resolution.
    pub fn anomaly_maps(&self, images: &[Array3<f32>], ids: &[String], scoring: &ScoringConfig) -> Result<Vec<AnomalyMap>> {
        if images.len() != ids.len() {
            return Err(Error::Argument(format!("{} images but {} ids", images.len(), ids.len())));
        }
        let prepared = self.prepare(images)?;
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let pairs = self.reconstruct(&refs)?;
        pairs
            .iter()
            .zip(images)
            .zip(ids)
            .zip(&prepared)
            .map(|(((groups, img), id), p)| {
                let views: Vec<_> = groups.iter().map(|(t, r)| (t.view(), r.view())).collect();
                anomaly_map(id.clone(), &views, p.grid, (img.dim().0, img.dim().1), scoring)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{toy_weights, ToyVitConfig};
    use crate::nn::trunc_normal;

    fn tiny() -> (Model, Vec<Prepared>) {
        let tc = ToyVitConfig { depth: 12, dim: 16, heads: 2, patch: 4, registers: 1, grid: 3, seed: 2 };
        let enc = Arc::new(FrozenEncoder::new(tc.weight_id(), toy_weights(&tc)).unwrap());
        let cfg = RunConfig::from_toml(
            "",
            &["bottleneck.noise_mode=none".into(), "bottleneck.hidden_dim=24".into(), "decoder.num_heads=2".into()],
        )
        .unwrap();
        let model = Model::new(enc, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs: Vec<Array3<f32>> = (0..2)
            .map(|_| trunc_normal::<f32, _>(&mut rng, (12, 36), 1.0).into_shape_with_order((12, 12, 3)).unwrap())
            .collect();
        let prep = model.prepare(&imgs).unwrap();
        (model, prep)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut model, prep) = tiny();
        let refs: Vec<&Prepared> = prep.iter().collect();
        let loose = LooseLossConfig::default();
        let (_, grads) = model.gradients(&refs, 0, 0, LossKind::Plain, &loose).unwrap();
        let mut analytic = Vec::new();
        grads.visit("", &mut |name, v| analytic.push((name, v.iter().copied().take(3).collect::<Vec<f32>>())));
        // f32 central differences; the per-module checks run in f64 with tight bounds
        // perturb the first entries of a few tensors spread across the model
        let h = 1e-4f32;
        for pick in [0usize, 5, analytic.len() - 1] {
            for e in 0..analytic[pick].1.len() {
                let bump = |m: &mut Model, delta: f32| {
                    let mut k = 0;
                    m.trainable.visit_mut("", &mut |_, mut v| {
                        if k == pick {
                            *v.iter_mut().nth(e).unwrap() += delta;
                        }
                        k += 1;
                    });
                };
                bump(&mut model, h);
                let up = model.gradients(&refs, 0, 0, LossKind::Plain, &loose).unwrap().0.loss;
                bump(&mut model, -2.0 * h);
                let down = model.gradients(&refs, 0, 0, LossKind::Plain, &loose).unwrap().0.loss;
                bump(&mut model, h);
                let fd = (up - down) / (2.0 * h as f64);
                let an = analytic[pick].1[e] as f64;
                assert!((fd - an).abs() <= 2e-2 * fd.abs().max(an.abs()).max(1e-2), "{} [{e}]: fd {fd} vs {an}", analytic[pick].0);
            }
        }
    }

    #[test]
    fn encoder_is_outside_the_trainable_set() {
        let (model, _) = tiny();
        let mut names = Vec::new();
        model.trainable.visit("", &mut |n, _| names.push(n));
        assert!(names.iter().all(|n| n.starts_with("bottleneck.") || n.starts_with("decoder.")));
    }

    #[test]
    fn reconstruction_is_batch_invariant() {
        let (model, prep) = tiny();
        let both = model.reconstruct(&prep.iter().collect::<Vec<_>>()).unwrap();
        let single = model.reconstruct(&[&prep[1]]).unwrap();
        for ((t1, r1), (t2, r2)) in both[1].iter().zip(&single[0]) {
            assert_eq!(t1, t2);
            assert!((r1 - r2).iter().all(|d| d.abs() < 1e-5));
        }
    }

    #[test]
    fn mismatched_decoder_depth_is_rejected() {
        let tc = ToyVitConfig { depth: 12, dim: 16, heads: 2, patch: 4, registers: 0, grid: 3, seed: 2 };
        let enc = Arc::new(FrozenEncoder::new(tc.weight_id(), toy_weights(&tc)).unwrap());
        let cfg = RunConfig::from_toml("", &["decoder.num_layers=6".into()]).unwrap();
        assert!(matches!(Model::new(enc, &cfg), Err(Error::Config(_))));
    }
}
