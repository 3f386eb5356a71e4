//! Configuration, optimization, training and the dataset-level commands.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod pipeline;
pub mod train;

use std::path::PathBuf;
use std::sync::Arc;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use config::{DatasetPreset, LossKind, RunConfig};
pub use optim::{lr_schedule, StableAdamW, StableAdamWConfig};
pub use pipeline::{evaluate_index, export_maps, object_scores, predict, render_maps, ImageResult};
pub use train::{read_log, ImageSource, LogLine, TrainItem, TrainOptions, TrainReport, TrainSet, Trainer};

use crate::encoder::{FrozenEncoder, WeightResolver};
use crate::error::{Error, Result};
use crate::metrics::{EvalMode, EvalReport};
use crate::model::Model;

/// Resolves `encoder.weight_id` through the default resolver.
pub fn load_encoder(cfg: &RunConfig) -> Result<Arc<FrozenEncoder>> {
    Ok(Arc::new(WeightResolver::default().load_encoder(&cfg.encoder.weight_id)?))
}

/// Trains on the configured dataset and writes the log, config and checkpoint under `train.out_dir`.
pub fn train_command(cfg: &RunConfig) -> Result<TrainReport> {
    let records = pipeline::load_records(cfg)?;
    let train = pipeline::train_records(&records);
    let model = Model::new(load_encoder(cfg)?, cfg)?;
    let spec = pipeline::preprocess_spec(cfg, &model);
    let set = TrainSet::from_records(&train, spec, cfg.data.augment.clone())?;
    let out = &cfg.train.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut trainer = Trainer::new(model, cfg.clone(), set)?;
    let ckpt = cfg.checkpoint_path();
    if cfg.train.resume && ckpt.is_file() {
        trainer.resume(&ckpt)?;
    }
    let opts = TrainOptions { log_path: Some(out.join("train_log.jsonl")), checkpoint_path: Some(ckpt), stop_after: None };
    trainer.run(&opts)
}

/// Builds the model and loads the trained checkpoint, refusing mismatched configurations.
pub fn load_trained(cfg: &RunConfig) -> Result<Model> {
    let mut model = Model::new(load_encoder(cfg)?, cfg)?;
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    load_checkpoint(&path, &mut model, None, &cfg.model_digest())?;
    Ok(model)
}

/// Scores the test split and writes maps, `index.json` and `scores.json` under `train.out_dir/maps`.
pub fn predict_command(cfg: &RunConfig) -> Result<PathBuf> {
    let model = load_trained(cfg)?;
    let records = pipeline::test_records(&pipeline::load_records(cfg)?);
    if records.is_empty() {
        return Err(Error::Data("the dataset has no test images".into()));
    }
    let spec = pipeline::preprocess_spec(cfg, &model);
    let results = predict(&model, &records, &spec, &cfg.scoring, cfg.train.batch_size)?;
    let dir = cfg.maps_dir();
    let index = export_maps(&results, &dir)?;
    let scores = pipeline::score_records(&results, cfg.scoring.top_percent)?;
    std::fs::write(dir.join("scores.json"), serde_json::to_vec_pretty(&scores)?)?;
    Ok(index)
}

/// Evaluates exported maps and writes `report.json` and `report.csv` under `train.out_dir`.
pub fn evaluate_command(cfg: &RunConfig, unified: bool) -> Result<EvalReport> {
    let index = cfg.maps_dir().join("index.json");
    if !index.is_file() {
        return Err(Error::Data(format!("no exported maps at {}; run predict first", index.display())));
    }
    let mode = if unified || cfg.eval.unified { EvalMode::Unified } else { EvalMode::PerCategory };
    let report = evaluate_index(&index, mode, cfg.scoring.top_percent, cfg.eval.fpr_limit)?;
    report.write_json(&cfg.train.out_dir.join("report.json"))?;
    report.write_csv(&cfg.train.out_dir.join("report.csv"))?;
    Ok(report)
}

/// Renders exported maps as PNGs under `train.out_dir/vis`, predicting first when needed.
pub fn export_maps_command(cfg: &RunConfig) -> Result<(PathBuf, usize)> {
    let index = cfg.maps_dir().join("index.json");
    if !index.is_file() {
        predict_command(cfg)?;
    }
    let dir = cfg.train.out_dir.join("vis");
    let n = render_maps(&index, &dir)?;
    Ok((dir, n))
}
