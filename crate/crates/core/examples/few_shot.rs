//! Few-shot training: keep K normal images per category and let the trainer
//! augment them online. Prints the evaluation for a few values of K.
//!
//! ```text
//! cargo run --release --example few_shot -- 1 4 8
//! ```

use dinolab::runtime::{evaluate_command, predict_command, train_command, RunConfig};
use dinolab::synthetic::{write_mvtec, SyntheticSpec};

fn main() -> dinolab::Result<()> {
    let shots: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let shots = if shots.is_empty() { vec![2, 8] } else { shots };
    let work = tempfile::tempdir()?;
    let data = work.path().join("textures");
    write_mvtec(&data, &SyntheticSpec { train_per_category: 16, ..Default::default() })?;

    println!("{:>5} {:>10} {:>10}", "shots", "I-AUROC", "P-AUROC");
    for k in shots {
        let overrides = [
            format!("data.root={:?}", data.display().to_string()),
            format!("train.out_dir={:?}", work.path().join(format!("k{k}")).display().to_string()),
            format!("data.few_shot.shots_per_class={k}"),
            "train.total_iters=300".to_string(),
        ];
        let cfg = RunConfig::from_toml(include_str!("configs/toy.toml"), &overrides)?;
        train_command(&cfg)?;
        predict_command(&cfg)?;
        let report = evaluate_command(&cfg, false)?;
        println!("{k:>5} {:>10.3} {:>10.3}", report.mean.image_auroc, report.mean.pixel_auroc.unwrap_or(f64::NAN));
    }
    Ok(())
}
