//! The noisy bottleneck under its three noise modes. Dropout is unbiased:
//! averaging many noisy passes recovers the eval-mode output, while a single
//! pass is perturbed.
//!
//! ```text
//! cargo run --release --example bottleneck_noise
//! ```

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dinolab::bottleneck::{BottleneckConfig, NoiseMode, NoisyBottleneck};

fn rel(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
    (a - b).mapv(|x| x * x).sum().sqrt() / b.mapv(|x| x * x).sum().sqrt()
}

fn main() -> dinolab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = Array2::from_shape_simple_fn((64, 128), || rng.random_range(-2.0f32..2.0));
    println!("{:<15} {:>16} {:>20}", "mode", "one-pass change", "2000-pass mean change");
    for mode in [NoiseMode::Dropout, NoiseMode::FeatureJitter, NoiseMode::None] {
        let cfg = BottleneckConfig { noise_mode: mode, num_layers: 1, ..Default::default() };
        let b = NoisyBottleneck::<f32>::new(&mut ChaCha8Rng::seed_from_u64(1), 128, cfg)?;
        let clean = b.forward(z.view(), false, 0)?;
        let once = b.forward(z.view(), true, 7)?;
        let mut mean = Array2::<f32>::zeros(clean.dim());
        for s in 0..2000 {
            mean += &b.forward(z.view(), true, s)?;
        }
        mean /= 2000.0;
        println!("{:<15} {:>16.4} {:>20.4}", format!("{mode:?}"), rel(&once, &clean), rel(&mean, &clean));
    }
    Ok(())
}
