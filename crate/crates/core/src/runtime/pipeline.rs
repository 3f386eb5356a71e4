//! Dataset-level inference, map export and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::config::RunConfig;
use crate::data::{group_views, load_mask, preprocess, resolve_root, scan_dataset, few_shot_subset, PreprocessSpec, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalMode, EvalReport, GroundTruth, Prediction};
use crate::model::Model;
use crate::scoring::{
    image_score, object_score, read_amap, read_index, visualize, write_amap, write_index, AnomalyMap, MapIndex,
    MapIndexEntry, ScoreRecord, ScoringConfig,
};

/// Model output for one test image.
#[derive(Clone, Debug)]
pub struct ImageResult {
    pub record: SampleRecord,
    pub map: AnomalyMap,
    pub image_score: f64,
}

/// Scans the configured dataset and applies the category filter and few-shot subsetting.
pub fn load_records(cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    let root = resolve_root(cfg.data.root.as_deref())?;
    let mut records = scan_dataset(&root, cfg.data.layout)?;
    if let Some(cats) = &cfg.data.categories {
        let unknown: Vec<&String> = cats.iter().filter(|c| !records.iter().any(|r| &r.category == *c)).collect();
        if !unknown.is_empty() {
            return Err(Error::Data(format!("categories {unknown:?} not found under {}", root.display())));
        }
        records.retain(|r| cats.contains(&r.category));
    }
    if cfg.data.few_shot.shots_per_class > 0 {
        records = few_shot_subset(&records, &cfg.data.few_shot)?;
    }
    Ok(records)
}

pub fn preprocess_spec(cfg: &RunConfig, model: &Model) -> PreprocessSpec {
    let spec = model.encoder.spec();
    PreprocessSpec { image_size: cfg.data.image_size, mean: spec.mean, std: spec.std, ..Default::default() }
}

/// Runs the model over `records` in batches of `batch_size`.
pub fn predict(
    model: &Model,
    records: &[SampleRecord],
    spec: &PreprocessSpec,
    scoring: &ScoringConfig,
    batch_size: usize,
) -> Result<Vec<ImageResult>> {
    spec.validate(model.encoder.spec().patch_size)?;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let images: Vec<Array3<f32>> = chunk.iter().map(|r| preprocess(&r.image_path, spec)).collect::<Result<_>>()?;
        let ids: Vec<String> = chunk.iter().map(|r| r.id.clone()).collect();
        for (r, map) in chunk.iter().zip(model.anomaly_maps(&images, &ids, scoring)?) {
            let s = image_score(map.full_map.view(), scoring.top_percent)?;
            out.push(ImageResult { record: r.clone(), map, image_score: s });
        }
    }
    Ok(out)
}

/// Object scores keyed by object id, pooling every view of an object.
pub fn object_scores(results: &[ImageResult], z_percent: f64) -> Result<BTreeMap<String, f64>> {
    let records: Vec<SampleRecord> = results.iter().map(|r| r.record.clone()).collect();
    let by_id: BTreeMap<&str, &ImageResult> = results.iter().map(|r| (r.record.id.as_str(), r)).collect();
    let mut out = BTreeMap::new();
    for g in group_views(&records)? {
        let maps: Vec<_> = g.members.iter().map(|m| by_id[m.id.as_str()].map.full_map.view()).collect();
        out.insert(g.object_id, object_score(&maps, z_percent)?);
    }
    Ok(out)
}

pub fn score_records(results: &[ImageResult], z_percent: f64) -> Result<Vec<ScoreRecord>> {
    let objects = object_scores(results, z_percent)?;
    Ok(results
        .iter()
        .map(|r| ScoreRecord {
            image_id: r.record.id.clone(),
            image_score: r.image_score,
            object_score: r.record.object_id.as_ref().map(|o| objects[o]),
            category: r.record.category.clone(),
            view: r.record.view.clone(),
            modality: Some(r.record.modality.as_str().to_string()),
        })
        .collect())
}

fn file_stem_for(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

/// Writes one `.amap` per image plus `index.json` into `dir`; returns the index path.
pub fn export_maps(results: &[ImageResult], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut index = MapIndex::new();
    for r in results {
        let file = format!("{}.amap", file_stem_for(&r.record.id));
        write_amap(&dir.join(&file), r.map.full_map.view())?;
        let entry = MapIndexEntry {
            file,
            label: r.record.label,
            category: r.record.category.clone(),
            view: r.record.view.clone(),
            modality: Some(r.record.modality.as_str().to_string()),
            mask_path: r.record.mask_path.as_ref().map(|p| p.to_string_lossy().into_owned()),
            image_score: Some(r.image_score),
            object_id: r.record.object_id.clone(),
        };
        if index.insert(r.record.id.clone(), entry).is_some() {
            return Err(Error::Data(format!("duplicate image id {}", r.record.id)));
        }
    }
    let path = dir.join("index.json");
    write_index(&path, &index)?;
    Ok(path)
}

/// Renders every map listed in the index as a PNG into `out_dir`.
pub fn render_maps(index_path: &Path, out_dir: &Path) -> Result<usize> {
    let index = read_index(index_path)?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(out_dir)?;
    for entry in index.values() {
        let map = read_amap(&base.join(&entry.file))?;
        let name = Path::new(&entry.file).with_extension("png");
        visualize(&out_dir.join(name), map.view())?;
    }
    Ok(index.len())
}

/// Computes metrics from exported maps and the ground truth referenced by the index.
///
/// When objects group several views, image-level metrics are computed per
/// object from the pooled object score, while pixel metrics use every view.
pub fn evaluate_index(index_path: &Path, mode: EvalMode, z_percent: f64, fpr_limit: f64) -> Result<EvalReport> {
    let index = read_index(index_path)?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut preds = Vec::with_capacity(index.len());
    let mut truth = BTreeMap::new();
    for (id, e) in &index {
        let map = read_amap(&base.join(&e.file))?;
        let mask = match &e.mask_path {
            Some(p) => Some(load_mask(Path::new(p), map.dim())?),
            None => None,
        };
        let score = match e.image_score {
            Some(s) => s,
            None => image_score(map.view(), z_percent)?,
        };
        truth.insert(id.clone(), GroundTruth { label: e.label, mask });
        preds.push(Prediction { image_id: id.clone(), category: e.category.clone(), score, map: Some(map) });
    }
    let mut report = evaluate(&preds, &truth, mode, fpr_limit)?;
    if index.values().any(|e| e.object_id.is_some()) {
        let (obj_preds, obj_truth) = object_level(&index, &preds, z_percent)?;
        let objects = evaluate(&obj_preds, &obj_truth, mode, fpr_limit)?;
        let keep_pixels = |dst: &mut crate::metrics::MetricSet, src: &crate::metrics::MetricSet| {
            dst.pixel_auroc = src.pixel_auroc;
            dst.pixel_ap = src.pixel_ap;
            dst.pixel_f1_max = src.pixel_f1_max;
            dst.pixel_aupro = src.pixel_aupro;
        };
        let mut merged = objects;
        for (cat, set) in merged.per_category.iter_mut() {
            keep_pixels(set, &report.per_category[cat]);
        }
        keep_pixels(&mut merged.mean, &report.mean);
        if let (Some(u), Some(src)) = (merged.unified.as_mut(), report.unified.as_ref()) {
            keep_pixels(u, src);
        }
        report = merged;
    }
    Ok(report)
}

fn object_level(
    index: &MapIndex,
    preds: &[Prediction],
    z_percent: f64,
) -> Result<(Vec<Prediction>, BTreeMap<String, GroundTruth>)> {
    let mut groups: BTreeMap<String, (String, u8, Vec<&Array2<f32>>)> = BTreeMap::new();
    for p in preds {
        let e = &index[&p.image_id];
        let key = e.object_id.clone().unwrap_or_else(|| p.image_id.clone());
        let g = groups.entry(key).or_insert_with(|| (e.category.clone(), 0, Vec::new()));
        if g.0 != e.category {
            return Err(Error::Data(format!("object {} mixes categories", p.image_id)));
        }
        g.1 = g.1.max(e.label);
        g.2.push(p.map.as_ref().expect("maps loaded above"));
    }
    let mut out = Vec::new();
    let mut truth = BTreeMap::new();
    for (id, (cat, label, maps)) in groups {
        let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
        out.push(Prediction { image_id: id.clone(), category: cat, score: object_score(&views, z_percent)?, map: None });
        truth.insert(id, GroundTruth { label, mask: None });
    }
    Ok((out, truth))
}

/// Test records of the configured dataset.
pub fn test_records(records: &[SampleRecord]) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.split == Split::Test).cloned().collect()
}

/// Train records of the configured dataset.
pub fn train_records(records: &[SampleRecord]) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.split == Split::Train).cloned().collect()
}
