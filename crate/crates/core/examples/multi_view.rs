//! Object-level scoring for products photographed from several angles: views
//! sharing an object id are grouped and their maps pooled into one score.
//!
//! ```text
//! cargo run --release --example multi_view
//! ```

use std::path::PathBuf;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dinolab::data::{group_views, Modality, SampleRecord, Split};
use dinolab::scoring::{image_score, object_score};

fn record(object: usize, view: usize, defective: bool) -> SampleRecord {
    SampleRecord {
        id: format!("obj{object}/view{view}"),
        image_path: PathBuf::from(format!("obj{object}_view{view}.png")),
        category: "screw".into(),
        split: Split::Test,
        label: (defective && view == 2) as u8,
        mask_path: None,
        view: Some(format!("view{view}")),
        modality: Modality::Rgb,
        object_id: Some(format!("obj{object}")),
        augment: false,
    }
}

fn main() -> dinolab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = 1.0;
    let records: Vec<SampleRecord> =
        (0..3).flat_map(|o| (0..5).map(move |v| record(o, v, o == 1))).collect();

    for group in group_views(&records)? {
        let maps: Vec<Array2<f32>> = group
            .members
            .iter()
            .map(|m| {
                let mut map = Array2::from_shape_simple_fn((28, 28), || rng.random_range(0.0..0.2));
                if m.label == 1 {
                    // a small defect visible in one view only
                    map.slice_mut(ndarray::s![10..14, 10..14]).fill(0.9);
                }
                map
            })
            .collect();
        let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
        let per_view: Vec<String> =
            views.iter().map(|v| image_score(*v, z).map(|s| format!("{s:.3}"))).collect::<Result<_, _>>()?;
        println!(
            "{} (label {}): views [{}] → object score {:.3}",
            group.object_id,
            group.label,
            per_view.join(", "),
            object_score(&views, z)?
        );
    }

    let map = Array2::from_shape_simple_fn((28, 28), || rng.random::<f32>());
    let one = image_score(map.view(), z)?;
    let five = object_score(&[map.view(); 5], z)?;
    println!("\nfive identical views score {five} and a single view {one}: equal = {}", one == five);
    Ok(())
}
