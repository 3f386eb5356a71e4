//! Combining modalities. Pixel-aligned RGB and depth images are fused at the
//! feature level by averaging their encoder features; modalities that are not
//! aligned are combined by adding their image scores.
//!
//! ```text
//! cargo run --release --example rgb_depth_fusion
//! ```

use ndarray::{Array3, Zip};

use dinolab::encoder::{normalize_image, recenter, select_layers, WeightResolver, IMAGENET_MEAN, IMAGENET_STD};
use dinolab::scoring::{fuse_rgb_3d, multimodal_score};

fn main() -> dinolab::Result<()> {
    let encoder = WeightResolver::default().load_encoder("toy")?;
    let selection = select_layers(encoder.spec(), None)?;
    let size = 112;

    // a shaded dome seen in colour and as a depth map rendered to three channels
    let height = |y: usize, x: usize| {
        let (dy, dx) = (y as f32 / size as f32 - 0.5, x as f32 / size as f32 - 0.5);
        (1.0 - 4.0 * (dx * dx + dy * dy)).max(0.0)
    };
    let mut rgb = Array3::from_shape_fn((size, size, 3), |(y, x, c)| 0.2 + 0.6 * height(y, x) * [1.0, 0.8, 0.5][c]);
    let mut depth = Array3::from_shape_fn((size, size, 3), |(y, x, _)| height(y, x));
    normalize_image(&mut rgb, IMAGENET_MEAN, IMAGENET_STD);
    normalize_image(&mut depth, IMAGENET_MEAN, IMAGENET_STD);

    let rgb_stack = recenter(&encoder.extract(&rgb, &selection)?)?;
    let depth_stack = recenter(&encoder.extract(&depth, &selection)?)?;
    let fused = fuse_rgb_3d(&rgb_stack, &depth_stack)?;

    println!("{:>5} {:>10} {:>10} {:>10}", "layer", "|rgb|", "|depth|", "|fused|");
    for (i, f) in &fused.layers {
        let norm = |a: &ndarray::Array2<f32>| a.iter().map(|v| v * v).sum::<f32>().sqrt();
        println!(
            "{i:>5} {:>10.2} {:>10.2} {:>10.2}",
            norm(&rgb_stack.layers[i].patches),
            norm(&depth_stack.layers[i].patches),
            norm(&f.patches)
        );
    }
    let l = selection.indices()[0];
    let mut exact = true;
    Zip::from(&fused.layers[&l].patches)
        .and(&rgb_stack.layers[&l].patches)
        .and(&depth_stack.layers[&l].patches)
        .for_each(|&f, &a, &b| exact &= f == (a + b) * 0.5);
    println!("fused = (rgb + depth) / 2 elementwise: {exact}");
    println!("fusing a stack with itself returns it unchanged: {}", fuse_rgb_3d(&rgb_stack, &rgb_stack)? == rgb_stack);

    println!("\nRGB score 0.31 + infrared score 0.27 → {:.2}", multimodal_score(&[0.31, 0.27])?);
    Ok(())
}
