//! Image- and pixel-level metrics on hand-made scores, including the gap
//! between per-category and pooled ("unified") evaluation.
//!
//! ```text
//! cargo run --release --example metrics
//! ```

use std::collections::BTreeMap;

use ndarray::Array2;

use dinolab::metrics::{aupro, auroc, average_precision, evaluate, f1_max, EvalMode, GroundTruth, Prediction};

fn main() -> dinolab::Result<()> {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0, 0, 1, 1];
    println!("AUROC {:.3}", auroc(&scores, &labels)?);
    println!("AP    {:.3}", average_precision(&scores, &labels)?);
    println!("F1max {:.3}", f1_max(&scores, &labels)?);

    // A map whose hot spot covers one of two defects.
    let mut mask = Array2::from_elem((8, 8), false);
    let mut map = Array2::<f32>::from_elem((8, 8), 0.1);
    for y in 1..3 {
        for x in 1..3 {
            mask[[y, x]] = true;
            map[[y, x]] = 0.9;
        }
    }
    mask[[6, 6]] = true;
    println!("AUPRO@0.3 with one of two regions found: {:.3}", aupro(&[map.view()], &[mask.view()], 0.3)?);

    // Two categories that separate perfectly on their own but overlap when pooled.
    let mut preds = Vec::new();
    let mut truth = BTreeMap::new();
    for (cat, vals) in [("bottle", [0.1, 0.2, 0.3, 0.4]), ("cable", [0.5, 0.6, 0.7, 0.8])] {
        for (i, s) in vals.into_iter().enumerate() {
            let id = format!("{cat}/{i}");
            preds.push(Prediction { image_id: id.clone(), category: cat.into(), score: s, map: None });
            truth.insert(id, GroundTruth { label: (i >= 2) as u8, mask: None });
        }
    }
    let report = evaluate(&preds, &truth, EvalMode::Unified, 0.3)?;
    for (cat, m) in &report.per_category {
        println!("{cat:<8} I-AUROC {:.3}", m.image_auroc);
    }
    println!("mean     I-AUROC {:.3}", report.mean.image_auroc);
    println!("unified  I-AUROC {:.3}", report.unified.expect("requested").image_auroc);
    Ok(())
}
