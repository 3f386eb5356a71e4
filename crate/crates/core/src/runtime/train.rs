//! Training loop with JSONL logging, periodic checkpoints and exact resume.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::config::RunConfig;
use super::optim::{lr_schedule, StableAdamW, StableAdamWConfig};
use crate::data::{augment, preprocess, AugmentSpec, BatchSampler, PreprocessSpec, SampleRecord};
use crate::error::{Error, Result};
use crate::model::{Model, Prepared, StepStats};
use crate::nn::Parameterized;
use crate::objective::discard_rate;

/// Where a training image comes from.
#[derive(Clone, Debug)]
pub enum ImageSource {
    File(PathBuf),
    /// Already normalized `H × W × 3`.
    Memory(Array3<f32>),
}

#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub source: ImageSource,
    pub augment: bool,
}

/// Normal training images plus the preprocessing applied to them.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub items: Vec<TrainItem>,
    pub preprocess: PreprocessSpec,
    pub augment: AugmentSpec,
}

impl TrainSet {
    /// Rejects anomalous records; keeps the per-record augmentation flag.
    pub fn from_records(records: &[SampleRecord], preprocess: PreprocessSpec, augment: AugmentSpec) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.label != 0) {
            return Err(Error::Data(format!("anomalous sample {} offered for training", r.id)));
        }
        let items = records
            .iter()
            .map(|r| TrainItem { id: r.id.clone(), source: ImageSource::File(r.image_path.clone()), augment: r.augment })
            .collect();
        Ok(Self { items, preprocess, augment })
    }

    fn load(&self, i: usize, rng_seed: u64) -> Result<Array3<f32>> {
        let item = &self.items[i];
        let img = match &item.source {
            ImageSource::File(p) => preprocess(p, &self.preprocess)?,
            ImageSource::Memory(a) => a.clone(),
        };
        Ok(if item.augment { augment(&img, &self.augment, &mut ChaCha8Rng::seed_from_u64(rng_seed)) } else { img })
    }
}

/// One JSONL line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub discard_rate: f64,
    pub wall_time: f64,
    #[serde(default)]
    pub skipped: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Stop (and checkpoint) once this many iterations are complete.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub start_iter: u64,
    pub end_iter: u64,
    /// `(iteration, loss)` of every applied update.
    pub losses: Vec<(u64, f64)>,
    pub skipped: Vec<u64>,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    optim: StableAdamW,
    set: TrainSet,
    iter: u64,
    bad_streak: usize,
    cache: HashMap<usize, Prepared>,
}

impl Trainer {
    pub fn new(model: Model, cfg: RunConfig, set: TrainSet) -> Result<Self> {
        if set.items.is_empty() {
            return Err(Error::Data("cannot train on an empty training set".into()));
        }
        set.preprocess.validate(model.encoder.spec().patch_size)?;
        let optim = StableAdamW::new(StableAdamWConfig::from(&cfg.train), &model.trainable);
        Ok(Self { cfg, model, optim, set, iter: 0, bad_streak: 0, cache: HashMap::new() })
    }

    pub fn iteration(&self) -> u64 {
        self.iter
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config_digest: self.cfg.model_digest(),
            weight_id: self.model.encoder.spec().weight_id.clone(),
            encoder_checksum: self.model.encoder.checksum(),
            iteration: self.iter,
            bad_streak: self.bad_streak,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.optim), &self.meta())
    }

    /// Restores parameters, optimizer state and the iteration counter.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let digest = self.cfg.model_digest();
        let meta = load_checkpoint(path, &mut self.model, Some(&mut self.optim), &digest)?;
        self.iter = meta.iteration;
        self.bad_streak = meta.bad_streak;
        log::info!("resumed from {} at iteration {}", path.display(), self.iter);
        Ok(())
    }

    fn cacheable(&self, i: usize) -> bool {
        self.cfg.train.cache_features && !self.set.items[i].augment
    }

    /// Encoder features for the batch, reusing cached entries where allowed.
    fn fetch(&mut self, batch: &[usize]) -> Result<Vec<Prepared>> {
        let seed = self.cfg.train.seed;
        let mut missing: Vec<(usize, usize)> = Vec::new();
        for (slot, &i) in batch.iter().enumerate() {
            if !self.cache.contains_key(&i) {
                missing.push((slot, i));
            }
        }
        let mut fresh: HashMap<usize, Prepared> = HashMap::new();
        for chunk in missing.chunks(self.cfg.train.batch_size.max(1)) {
            let images = chunk
                .iter()
                .map(|&(slot, i)| self.set.load(i, mix(mix(seed, self.iter), slot as u64 + 1)))
                .collect::<Result<Vec<_>>>()?;
            for (&(slot, i), p) in chunk.iter().zip(self.model.prepare(&images)?) {
                if self.cacheable(i) {
                    self.cache.insert(i, p);
                } else {
                    fresh.insert(slot, p);
                }
            }
        }
        Ok(batch
            .iter()
            .enumerate()
            .map(|(slot, i)| fresh.remove(&slot).unwrap_or_else(|| self.cache[i].clone()))
            .collect())
    }

    fn step(&mut self, batch: &[usize], lr: f64) -> Result<Option<StepStats>> {
        let prepared = match self.fetch(batch) {
            Ok(p) => p,
            Err(Error::Numeric(m)) => {
                log::warn!("iteration {}: {m}", self.iter);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let noise_seed = mix(self.cfg.train.seed ^ 0x5EED, self.iter);
        let obj = &self.cfg.objective;
        let (stats, grads) = match self.model.gradients(&refs, self.iter, noise_seed, obj.loss, &obj.loose) {
            Ok(r) => r,
            Err(Error::Numeric(m)) => {
                log::warn!("iteration {}: {m}", self.iter);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        if !stats.loss.is_finite() || !grads.all_finite() {
            log::warn!("iteration {}: non-finite loss or gradient, batch skipped", self.iter);
            return Ok(None);
        }
        self.optim.step(&mut self.model.trainable, &grads, lr)?;
        Ok(Some(stats))
    }

    /// Trains until `total_iters` (or `opts.stop_after`), starting from the current iteration.
    pub fn run(&mut self, opts: &TrainOptions) -> Result<TrainReport> {
        let t = &self.cfg.train;
        let total = t.total_iters;
        let end = opts.stop_after.map_or(total, |s| s.min(total));
        let mut sampler = BatchSampler::over(self.set.items.len(), t.batch_size, t.seed, total as usize);
        sampler.skip_batches(self.iter as usize);
        let mut log = match &opts.log_path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                let append = self.iter > 0;
                let f: File = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(p)?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let mut report = TrainReport { start_iter: self.iter, ..Default::default() };
        let started = Instant::now();
        while self.iter < end {
            let batch = sampler.next().expect("sampler yields total_iters batches");
            let t = &self.cfg.train;
            let lr = lr_schedule(self.iter, t.lr_peak, t.lr_floor, t.warmup_iters, t.total_iters);
            let rate = discard_rate(self.iter, &self.cfg.objective.loose);
            let outcome = self.step(&batch, lr)?;
            let line = LogLine {
                iter: self.iter,
                loss: outcome.as_ref().map_or(f64::NAN, |s| s.loss),
                lr,
                discard_rate: rate,
                wall_time: started.elapsed().as_secs_f64(),
                skipped: outcome.is_none(),
            };
            match outcome {
                Some(s) => {
                    self.bad_streak = 0;
                    report.losses.push((self.iter, s.loss));
                }
                None => {
                    self.bad_streak += 1;
                    report.skipped.push(self.iter);
                    if self.bad_streak > self.cfg.train.max_bad_batches {
                        return Err(Error::Training(format!(
                            "{} consecutive non-finite batches ending at iteration {}",
                            self.bad_streak, self.iter
                        )));
                    }
                }
            }
            if let Some(w) = log.as_mut() {
                // NaN is not valid JSON; skipped batches carry a null loss
                let mut v = serde_json::to_value(&line)?;
                if line.skipped {
                    v["loss"] = serde_json::Value::Null;
                }
                writeln!(w, "{v}")?;
            }
            if self.iter % 100 == 0 {
                log::info!("iter {} loss {:.5} lr {:.2e} discard {:.3}", line.iter, line.loss, lr, rate);
            }
            self.iter += 1;
            let every = self.cfg.train.checkpoint_every;
            if let Some(p) = &opts.checkpoint_path {
                if every > 0 && self.iter % every == 0 && self.iter < end {
                    self.save(p)?;
                }
            }
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        if let Some(p) = &opts.checkpoint_path {
            self.save(p)?;
        }
        report.end_iter = self.iter;
        Ok(report)
    }
}

/// Parses a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l)?;
            if v["loss"].is_null() {
                v["loss"] = serde_json::json!(f64::MAX);
            }
            let mut line: LogLine = serde_json::from_value(v)?;
            if line.skipped {
                line.loss = f64::NAN;
            }
            Ok(line)
        })
        .collect()
}
