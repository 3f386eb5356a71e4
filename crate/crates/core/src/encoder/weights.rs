//! Resolution of `weight_id` strings to backbone weights.
//!
//! Order: an existing local file, then `$DINOLAB_CACHE/<id>` (with or without
//! a `.dlw` suffix), then each registered [`WeightHook`] in turn.

use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vit::VitWeights;
use super::FrozenEncoder;
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Linear};

pub const CACHE_ENV: &str = "DINOLAB_CACHE";

/// Supplies weights for ids it recognises, e.g. by downloading them.
pub trait WeightHook: Send + Sync {
    fn name(&self) -> &str;
    /// `None` when the id is not handled by this hook.
    fn fetch(&self, weight_id: &str) -> Option<Result<VitWeights>>;
}

pub struct WeightResolver {
    cache_dir: Option<PathBuf>,
    hooks: Vec<Box<dyn WeightHook>>,
}

impl Default for WeightResolver {
    /// Reads the cache directory from the environment and registers the toy backbone.
    fn default() -> Self {
        let mut r = Self::new(std::env::var_os(CACHE_ENV).map(PathBuf::from));
        r.register(Box::new(ToyBackboneHook));
        r
    }
}

impl WeightResolver {
    pub fn new(cache_dir: Option<PathBuf>) -> Self {
        Self { cache_dir, hooks: Vec::new() }
    }

    pub fn register(&mut self, hook: Box<dyn WeightHook>) {
        self.hooks.push(hook);
    }

    pub fn cache_dir(&self) -> Option<&Path> {
        self.cache_dir.as_deref()
    }

    pub fn resolve(&self, weight_id: &str) -> Result<VitWeights> {
        let local = Path::new(weight_id);
        if local.is_file() {
            return VitWeights::load(local);
        }
        if let Some(dir) = &self.cache_dir {
            for candidate in [dir.join(weight_id), dir.join(format!("{weight_id}.dlw"))] {
                if candidate.is_file() {
                    return VitWeights::load(&candidate);
                }
            }
        }
        for hook in &self.hooks {
            if let Some(res) = hook.fetch(weight_id) {
                return res.map_err(|e| Error::Load { id: weight_id.into(), reason: format!("{}: {e}", hook.name()) });
            }
        }
        Err(Error::Load {
            id: weight_id.into(),
            reason: format!(
                "not a local file, not in cache {:?}, and no hook among [{}] recognised it",
                self.cache_dir,
                self.hooks.iter().map(|h| h.name()).collect::<Vec<_>>().join(", ")
            ),
        })
    }

    pub fn load_encoder(&self, weight_id: &str) -> Result<FrozenEncoder> {
        FrozenEncoder::new(weight_id, self.resolve(weight_id)?)
    }
}

/// Architecture and initialisation of a randomly initialised test backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyVitConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub registers: usize,
    pub grid: usize,
    pub seed: u64,
}

impl Default for ToyVitConfig {
    fn default() -> Self {
        Self { depth: 12, dim: 128, heads: 2, patch: 14, registers: 0, grid: 8, seed: 0 }
    }
}

impl ToyVitConfig {
    /// Parses `toy:key=value,...`; unspecified keys keep their defaults.
    pub fn parse(weight_id: &str) -> Option<Result<Self>> {
        let rest = weight_id.strip_prefix("toy:").or_else(|| (weight_id == "toy").then_some(""))?;
        let mut cfg = Self::default();
        for kv in rest.split(',').filter(|s| !s.is_empty()) {
            let Some((k, v)) = kv.split_once('=') else {
                return Some(Err(Error::config(format!("malformed toy backbone option `{kv}`"))));
            };
            let Ok(n) = v.trim().parse::<u64>() else {
                return Some(Err(Error::config(format!("toy backbone option `{k}` needs an integer"))));
            };
            match k.trim() {
                "depth" => cfg.depth = n as usize,
                "dim" => cfg.dim = n as usize,
                "heads" => cfg.heads = n as usize,
                "patch" => cfg.patch = n as usize,
                "registers" => cfg.registers = n as usize,
                "grid" => cfg.grid = n as usize,
                "seed" => cfg.seed = n,
                other => return Some(Err(Error::config(format!("unknown toy backbone option `{other}`")))),
            }
        }
        if cfg.dim == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 || cfg.grid == 0 {
            return Some(Err(Error::config(format!("invalid toy backbone {cfg:?}"))));
        }
        Some(Ok(cfg))
    }

    pub fn weight_id(&self) -> String {
        format!(
            "toy:depth={},dim={},heads={},patch={},registers={},grid={},seed={}",
            self.depth, self.dim, self.heads, self.patch, self.registers, self.grid, self.seed
        )
    }
}

/// Deterministic random ViT weights.
///
/// Projections use `1/sqrt(fan_in)` scaled normals and LayerScale 0.5 so that
/// token identity survives all blocks while deeper layers still mix context.
pub fn toy_weights(cfg: &ToyVitConfig) -> VitWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let hidden = 4 * d;
    let mut w = VitWeights::zeros(cfg.depth, d, cfg.heads, hidden, cfg.patch, cfg.registers, (cfg.grid, cfg.grid), 1e-6);
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    w.patch_embed = Linear::init(&mut rng, 3 * cfg.patch * cfg.patch, d, fan(3 * cfg.patch * cfg.patch));
    w.cls_token = trunc_normal::<f32, _>(&mut rng, (1, d), 0.5).row(0).to_owned();
    w.register_tokens = trunc_normal(&mut rng, (cfg.registers, d), 0.5);
    w.pos_embed = trunc_normal(&mut rng, (1 + cfg.grid * cfg.grid, d), 0.1);
    for b in &mut w.blocks {
        b.attn.qkv = Linear::init(&mut rng, d, 3 * d, fan(d));
        b.attn.proj = Linear::init(&mut rng, d, d, fan(d));
        b.fc1 = Linear::init(&mut rng, d, hidden, fan(d));
        b.fc2 = Linear::init(&mut rng, hidden, d, fan(hidden));
        b.ls1 = Array1::from_elem(d, 0.5);
        b.ls2 = Array1::from_elem(d, 0.5);
    }
    w
}

/// Materialises `toy:...` ids.
pub struct ToyBackboneHook;

impl WeightHook for ToyBackboneHook {
    fn name(&self) -> &str {
        "toy-backbone"
    }

    fn fetch(&self, weight_id: &str) -> Option<Result<VitWeights>> {
        ToyVitConfig::parse(weight_id).map(|cfg| cfg.map(|c| toy_weights(&c)))
    }
}
