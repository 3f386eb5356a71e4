//! Per-category and inference-unified evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{aupro, auroc, average_precision, f1_max};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    PerCategory,
    /// Also pools every image of every category into one set.
    Unified,
}

/// Model output for one image (or one object, for grouped views).
#[derive(Clone, Debug)]
pub struct Prediction {
    pub image_id: String,
    pub category: String,
    pub score: f64,
    pub map: Option<Array2<f32>>,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub label: u8,
    /// `None` for normal images (all background) or anomalies without a mask.
    pub mask: Option<Array2<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub image_auroc: f64,
    pub image_ap: f64,
    pub image_f1_max: f64,
    pub pixel_auroc: Option<f64>,
    pub pixel_ap: Option<f64>,
    pub pixel_f1_max: Option<f64>,
    pub pixel_aupro: Option<f64>,
}

impl MetricSet {
    pub fn entries(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("image_auroc", Some(self.image_auroc)),
            ("image_ap", Some(self.image_ap)),
            ("image_f1_max", Some(self.image_f1_max)),
            ("pixel_auroc", self.pixel_auroc),
            ("pixel_ap", self.pixel_ap),
            ("pixel_f1_max", self.pixel_f1_max),
            ("pixel_aupro", self.pixel_aupro),
        ]
    }

    fn mean(sets: &[&MetricSet]) -> MetricSet {
        let n = sets.len() as f64;
        let avg = |f: fn(&MetricSet) -> f64| sets.iter().map(|s| f(s)).sum::<f64>() / n;
        let avg_opt = |f: fn(&MetricSet) -> Option<f64>| -> Option<f64> {
            sets.iter().map(|s| f(s)).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n)
        };
        MetricSet {
            image_auroc: avg(|s| s.image_auroc),
            image_ap: avg(|s| s.image_ap),
            image_f1_max: avg(|s| s.image_f1_max),
            pixel_auroc: avg_opt(|s| s.pixel_auroc),
            pixel_ap: avg_opt(|s| s.pixel_ap),
            pixel_f1_max: avg_opt(|s| s.pixel_f1_max),
            pixel_aupro: avg_opt(|s| s.pixel_aupro),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: BTreeMap<String, MetricSet>,
    /// Arithmetic mean of the per-category values.
    pub mean: MetricSet,
    pub unified: Option<MetricSet>,
}

impl EvalReport {
    /// `(category, metric, value)` rows; the mean and unified sets use those names as category.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        let mut push = |cat: &str, set: &MetricSet| {
            for (name, v) in set.entries() {
                if let Some(v) = v {
                    out.push((cat.to_string(), name.to_string(), v));
                }
            }
        };
        for (c, s) in &self.per_category {
            push(c, s);
        }
        push("mean", &self.mean);
        if let Some(u) = &self.unified {
            push("unified", u);
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["category", "metric", "value"])?;
        for (c, m, v) in self.rows() {
            w.write_record([c, m, format!("{v}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn metric_set(items: &[(&Prediction, &GroundTruth)], fpr_limit: f64) -> Result<MetricSet> {
    let scores: Vec<f64> = items.iter().map(|(p, _)| p.score).collect();
    let labels: Vec<u8> = items.iter().map(|(_, g)| g.label).collect();
    let mut set = MetricSet {
        image_auroc: auroc(&scores, &labels)?,
        image_ap: average_precision(&scores, &labels)?,
        image_f1_max: f1_max(&scores, &labels)?,
        pixel_auroc: None,
        pixel_ap: None,
        pixel_f1_max: None,
        pixel_aupro: None,
    };
    if items.iter().any(|(p, _)| p.map.is_none()) {
        return Ok(set);
    }
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for (p, g) in items {
        let map = p.map.as_ref().expect("checked above");
        let mask = match (&g.mask, g.label) {
            (Some(m), _) => m.clone(),
            (None, 0) => Array2::from_elem(map.dim(), false),
            // anomalous without a mask: image-level only
            (None, _) => continue,
        };
        if mask.dim() != map.dim() {
            return Err(Error::shape(format!("{}: map {:?} vs mask {:?}", p.image_id, map.dim(), mask.dim())));
        }
        maps.push(map.view());
        masks.push(mask);
    }
    if !masks.iter().any(|m| m.iter().any(|&b| b)) {
        return Ok(set);
    }
    let pixel_scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().map(|&v| v as f64)).collect();
    let pixel_labels: Vec<u8> = masks.iter().flat_map(|m| m.iter().map(|&b| b as u8)).collect();
    set.pixel_auroc = Some(auroc(&pixel_scores, &pixel_labels)?);
    set.pixel_ap = Some(average_precision(&pixel_scores, &pixel_labels)?);
    set.pixel_f1_max = Some(f1_max(&pixel_scores, &pixel_labels)?);
    let mask_views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    set.pixel_aupro = Some(aupro(&maps, &mask_views, fpr_limit)?);
    Ok(set)
}

/// Computes every metric per category and their mean; `Unified` adds the pooled set.
///
/// Pixel metrics appear only when every prediction carries a map and some
/// mask has foreground pixels.
pub fn evaluate(
    predictions: &[Prediction],
    truth: &BTreeMap<String, GroundTruth>,
    mode: EvalMode,
    fpr_limit: f64,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let missing: Vec<String> =
        predictions.iter().filter(|p| !truth.contains_key(&p.image_id)).map(|p| p.image_id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth { missing });
    }
    let paired: Vec<(&Prediction, &GroundTruth)> = predictions.iter().map(|p| (p, &truth[&p.image_id])).collect();
    let mut by_cat: BTreeMap<&str, Vec<(&Prediction, &GroundTruth)>> = BTreeMap::new();
    for &(p, g) in &paired {
        by_cat.entry(p.category.as_str()).or_default().push((p, g));
    }
    let mut per_category = BTreeMap::new();
    for (cat, items) in &by_cat {
        let set = metric_set(items, fpr_limit).map_err(|e| match e {
            Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("category {cat}: {m}")),
            other => other,
        })?;
        per_category.insert(cat.to_string(), set);
    }
    let mean = MetricSet::mean(&per_category.values().collect::<Vec<_>>());
    let unified = match mode {
        EvalMode::PerCategory => None,
        EvalMode::Unified => Some(metric_set(&paired, fpr_limit)?),
    };
    Ok(EvalReport { per_category, mean, unified })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, cat: &str, score: f64) -> Prediction {
        Prediction { image_id: id.into(), category: cat.into(), score, map: None }
    }

    fn gap_instance() -> (Vec<Prediction>, BTreeMap<String, GroundTruth>) {
        let rows = [("a0", "a", 0.1, 0), ("a1", "a", 0.2, 0), ("a2", "a", 0.3, 1), ("a3", "a", 0.4, 1),
            ("b0", "b", 0.5, 0), ("b1", "b", 0.6, 0), ("b2", "b", 0.7, 1), ("b3", "b", 0.8, 1)];
        let preds = rows.iter().map(|r| pred(r.0, r.1, r.2)).collect();
        let truth = rows.iter().map(|r| (r.0.to_string(), GroundTruth { label: r.3, mask: None })).collect();
        (preds, truth)
    }

    #[test]
    fn unified_pooling_exposes_calibration_gap() {
        let (p, t) = gap_instance();
        let r = evaluate(&p, &t, EvalMode::Unified, 0.3).unwrap();
        assert_eq!(r.per_category["a"].image_auroc, 1.0);
        assert_eq!(r.per_category["b"].image_auroc, 1.0);
        assert_eq!(r.mean.image_auroc, 1.0);
        // pooled: positives .3/.4 lose to negatives .5/.6, 12 of 16 pairs correct
        assert_eq!(r.unified.as_ref().unwrap().image_auroc, 0.75);
        let plain = evaluate(&p, &t, EvalMode::PerCategory, 0.3).unwrap();
        assert_eq!(plain.mean, r.mean);
        assert!(plain.unified.is_none());
    }

    #[test]
    fn single_category_mean_equals_unified() {
        let (p, t) = gap_instance();
        let r = evaluate(&p[..4], &t, EvalMode::Unified, 0.3).unwrap();
        assert_eq!(r.unified.unwrap(), r.mean);
    }

    #[test]
    fn missing_truth_lists_ids() {
        let (mut p, t) = gap_instance();
        p.push(pred("zz", "a", 0.3));
        p.push(pred("yy", "b", 0.3));
        match evaluate(&p, &t, EvalMode::PerCategory, 0.3) {
            Err(Error::MissingGroundTruth { missing }) => assert_eq!(missing, vec!["zz", "yy"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pixel_metrics_and_csv() {
        let mut mask = Array2::from_elem((4, 4), false);
        mask[[1, 1]] = true;
        let hot = mask.mapv(|b| b as u8 as f32);
        let preds = vec![
            Prediction { image_id: "n".into(), category: "c".into(), score: 0.1, map: Some(Array2::zeros((4, 4))) },
            Prediction { image_id: "p".into(), category: "c".into(), score: 0.9, map: Some(hot) },
            Prediction { image_id: "q".into(), category: "c".into(), score: 0.8, map: Some(Array2::zeros((4, 4))) },
        ];
        let mut truth = BTreeMap::new();
        truth.insert("n".to_string(), GroundTruth { label: 0, mask: None });
        truth.insert("p".to_string(), GroundTruth { label: 1, mask: Some(mask) });
        truth.insert("q".to_string(), GroundTruth { label: 1, mask: None });
        let r = evaluate(&preds, &truth, EvalMode::PerCategory, 0.3).unwrap();
        let c = &r.per_category["c"];
        assert_eq!(c.pixel_auroc, Some(1.0));
        assert_eq!(c.pixel_aupro, Some(1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("category,metric,value\nc,image_auroc,1\n"));
        assert_eq!(text.lines().count(), 1 + 14);
        let jp = dir.path().join("r.json");
        r.write_json(&jp).unwrap();
        let back: EvalReport = serde_json::from_slice(&std::fs::read(&jp).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
