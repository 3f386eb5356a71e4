//! Generates the synthetic texture dataset, trains one model on all
//! categories together, exports maps and prints the evaluation report.
//!
//! ```text
//! cargo run --release --example toy_pipeline -- train.total_iters=300
//! ```
//!
//! Trailing `key=value` arguments override the bundled configuration.

use dinolab::runtime::{evaluate_command, predict_command, train_command, RunConfig};
use dinolab::synthetic::{write_mvtec, SyntheticSpec};

fn main() -> dinolab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let work = tempfile::tempdir()?;
    let data = work.path().join("textures");
    let n = write_mvtec(&data, &SyntheticSpec::default())?;
    println!("wrote {n} images to {}", data.display());

    let mut overrides = vec![
        format!("data.root={:?}", data.display().to_string()),
        format!("train.out_dir={:?}", work.path().join("run").display().to_string()),
    ];
    overrides.extend(std::env::args().skip(1));
    let cfg = RunConfig::from_toml(include_str!("configs/toy.toml"), &overrides)?;

    let report = train_command(&cfg)?;
    let last = report.losses.last().map_or(f64::NAN, |l| l.1);
    println!("trained {} iterations, final loss {last:.4}", report.end_iter);

    let index = predict_command(&cfg)?;
    println!("maps written to {}", index.parent().unwrap().display());

    let eval = evaluate_command(&cfg, true)?;
    println!("{:<10} {:<14} {:>8}", "category", "metric", "value");
    for (cat, metric, value) in eval.rows() {
        println!("{cat:<10} {metric:<14} {value:>8.4}");
    }
    Ok(())
}
