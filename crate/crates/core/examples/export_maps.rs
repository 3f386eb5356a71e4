//! Trains briefly on the synthetic textures, then writes the raw anomaly maps
//! (`maps/*.amap` with `index.json` and `scores.json`) and colour renderings
//! (`vis/*.png`) under `runs/export_maps`.
//!
//! ```text
//! cargo run --release --example export_maps
//! ```

use dinolab::runtime::{export_maps_command, train_command, RunConfig};
use dinolab::scoring::{read_amap, read_index};
use dinolab::synthetic::{write_mvtec, SyntheticSpec};

fn main() -> dinolab::Result<()> {
    let out = std::path::Path::new("runs/export_maps");
    let data = out.join("data");
    write_mvtec(&data, &SyntheticSpec { train_per_category: 16, test_normal_per_category: 3, test_anomalous_per_category: 3, ..Default::default() })?;
    let cfg = RunConfig::from_toml(
        include_str!("configs/toy.toml"),
        &[
            format!("data.root={:?}", data.display().to_string()),
            format!("train.out_dir={:?}", out.display().to_string()),
            "train.total_iters=200".into(),
        ],
    )?;
    train_command(&cfg)?;
    let (vis, n) = export_maps_command(&cfg)?;
    println!("rendered {n} maps into {}", vis.display());

    let index_path = cfg.maps_dir().join("index.json");
    let index = read_index(&index_path)?;
    for (id, entry) in index.iter().take(6) {
        let map = read_amap(&cfg.maps_dir().join(&entry.file))?;
        let peak = map.iter().cloned().fold(f32::MIN, f32::max);
        println!(
            "{id:<28} label {} score {:.4} peak {peak:.4} {:?}",
            entry.label,
            entry.image_score.unwrap_or(f64::NAN),
            map.dim()
        );
    }
    Ok(())
}
