//! Run configuration: a TOML document with one table per module plus
//! dotted-path overrides such as `objective.scheme=group4`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bottleneck::BottleneckConfig;
use crate::data::{AugmentSpec, FewShotSpec, Layout};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::objective::{LooseLossConfig, SchemeMode};
use crate::scoring::ScoringConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub weight_id: String,
    /// Explicit 1-based tap indices; the depth-based default applies when absent.
    pub layers: Option<Vec<usize>>,
    pub recenter: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { weight_id: "toy".into(), layers: None, recenter: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Loose,
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub scheme: SchemeMode,
    pub loss: LossKind,
    pub loose: LooseLossConfig,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self { scheme: SchemeMode::Group2, loss: LossKind::Loose, loose: LooseLossConfig::default() }
    }
}

/// Benchmarks with their default iteration budget, input size and top-z%.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPreset {
    MvtecAd,
    Visa,
    Mpdd,
    Btad,
    RealIad,
    MantaTiny,
    Mvtec3d,
    MulsenAd,
    UniMedical,
    Apocell,
    Miad,
    DroneAnomaly,
}

impl DatasetPreset {
    pub fn total_iters(self) -> u64 {
        use DatasetPreset::*;
        match self {
            MvtecAd | Visa | Mvtec3d | UniMedical => 40_000,
            Mpdd | Btad | MulsenAd => 20_000,
            RealIad | MantaTiny | Miad => 100_000,
            Apocell | DroneAnomaly => 10_000,
        }
    }

    pub fn image_size(self) -> usize {
        match self {
            DatasetPreset::MantaTiny | DatasetPreset::UniMedical | DatasetPreset::Apocell => 280,
            _ => 392,
        }
    }

    pub fn top_percent(self) -> f64 {
        if self == DatasetPreset::RealIad {
            0.1
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Falls back to `$DINOLAB_DATA`.
    pub root: Option<PathBuf>,
    pub layout: Layout,
    pub preset: Option<DatasetPreset>,
    /// Zero takes the preset's size, else 392.
    pub image_size: usize,
    /// Restricts training and evaluation to these categories when set.
    pub categories: Option<Vec<String>>,
    pub few_shot: FewShotSpec,
    pub augment: AugmentSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            layout: Layout::Mvtec,
            preset: None,
            image_size: 0,
            categories: None,
            few_shot: FewShotSpec::default(),
            augment: AugmentSpec::default(),
        }
    }
}

impl DataSection {
    pub fn resolved_image_size(&self) -> usize {
        match (self.image_size, self.preset) {
            (0, Some(p)) => p.image_size(),
            (0, None) => 392,
            (s, _) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_iters: u64,
    /// Zero takes the dataset preset's budget.
    pub total_iters: u64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Update-RMS threshold of the stabilized AdamW step.
    pub clip_threshold: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Zero writes a checkpoint only at the end.
    pub checkpoint_every: u64,
    /// Consecutive non-finite batches tolerated before aborting.
    pub max_bad_batches: usize,
    /// Extract encoder features once per training image when no augmentation is active.
    pub cache_features: bool,
    /// Continue from `<out_dir>/checkpoint.dlck` when it exists.
    pub resume: bool,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2e-3,
            lr_floor: 2e-4,
            warmup_iters: 100,
            total_iters: 0,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-10,
            clip_threshold: 1.0,
            batch_size: 16,
            seed: 0,
            checkpoint_every: 0,
            max_bad_batches: 10,
            cache_features: true,
            resume: false,
            out_dir: PathBuf::from("runs/dinolab"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_peak) {
            return Err(Error::config("train.lr_floor must satisfy 0 < lr_floor <= lr_peak"));
        }
        if self.total_iters == 0 || self.warmup_iters >= self.total_iters {
            return Err(Error::config(format!(
                "train.warmup_iters ({}) must be below train.total_iters ({})",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || self.eps <= 0.0 || self.clip_threshold <= 0.0 {
            return Err(Error::config("train.betas must lie in [0, 1); eps and clip_threshold must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub fpr_limit: f64,
    pub unified: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { fpr_limit: 0.3, unified: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderSection,
    pub bottleneck: BottleneckConfig,
    pub decoder: DecoderConfig,
    pub objective: ObjectiveSection,
    pub scoring: ScoringConfig,
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

/// Sets `path` (dot separated) in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let leaf = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(format!("empty key in `{path}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{p}` in `{path}` is not a table")))?;
    }
    cur.insert(leaf.to_string(), value);
    Ok(())
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies `key=value` overrides, fills
    /// preset-derived values and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills zero-valued fields from the dataset preset.
    pub fn resolve(&mut self) {
        if self.train.total_iters == 0 {
            self.train.total_iters = self.data.preset.map(DatasetPreset::total_iters).unwrap_or(10_000);
        }
        self.data.image_size = self.data.resolved_image_size();
    }

    pub fn validate(&self) -> Result<()> {
        self.bottleneck.validate()?;
        self.objective.loose.validate()?;
        self.scoring.validate()?;
        self.train.validate()?;
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            return Err(Error::config("eval.fpr_limit must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 over everything that determines the trained network's shape and meaning.
    pub fn model_digest(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            encoder: &'a EncoderSection,
            bottleneck: &'a BottleneckConfig,
            decoder: &'a DecoderConfig,
            scheme: SchemeMode,
        }
        let view = View {
            encoder: &self.encoder,
            bottleneck: &self.bottleneck,
            decoder: &self.decoder,
            scheme: self.objective.scheme,
        };
        let json = serde_json::to_vec(&view).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.train.out_dir.join("checkpoint.dlck")
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.train.out_dir.join("maps")
    }
}
