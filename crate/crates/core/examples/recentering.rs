//! Effect of subtracting each layer's class token from its patch tokens on
//! features of the toy encoder: how similar the patch tokens of two different
//! textures look before and after.
//!
//! ```text
//! cargo run --release --example recentering
//! ```

use dinolab::data::{preprocess, PreprocessSpec};
use dinolab::encoder::{recenter, select_layers, uncenter, FeatureStack, WeightResolver};
use dinolab::synthetic::{write_mvtec, SyntheticSpec};

fn mean_cosine(a: &FeatureStack, b: &FeatureStack, layer: usize) -> f64 {
    let (pa, pb) = (&a.layers[&layer].patches, &b.layers[&layer].patches);
    let rows = pa.nrows() as f64;
    pa.outer_iter()
        .zip(pb.outer_iter())
        .map(|(x, y)| (x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt())) as f64)
        .sum::<f64>()
        / rows
}

fn main() -> dinolab::Result<()> {
    let work = tempfile::tempdir()?;
    write_mvtec(work.path(), &SyntheticSpec { train_per_category: 1, test_normal_per_category: 0, test_anomalous_per_category: 0, ..Default::default() })?;
    let encoder = WeightResolver::default().load_encoder("toy")?;
    let selection = select_layers(encoder.spec(), None)?;
    let spec = PreprocessSpec { image_size: 112, ..Default::default() };
    let load = |cat: &str| preprocess(&work.path().join(cat).join("train/good/000.png"), &spec);
    let a = encoder.extract(&load("stripes")?, &selection)?;
    let b = encoder.extract(&load("dots")?, &selection)?;
    let (ra, rb) = (recenter(&a)?, recenter(&b)?);

    println!("mean cosine between patch tokens of two textures at the same position");
    println!("{:>5} {:>10} {:>12}", "layer", "raw", "recentered");
    for &l in selection.indices() {
        println!("{l:>5} {:>10.3} {:>12.3}", mean_cosine(&a, &b, l), mean_cosine(&ra, &rb, l));
    }
    let back = uncenter(&ra)?;
    let err = a
        .layers
        .values()
        .zip(back.layers.values())
        .map(|(x, y)| (&x.patches - &y.patches).iter().fold(0.0f32, |m, v| m.max(v.abs())))
        .fold(0.0f32, f32::max);
    println!("\nround trip max error {err:.2e}");
    Ok(())
}
