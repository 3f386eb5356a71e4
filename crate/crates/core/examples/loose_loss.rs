//! How the loose loss treats well-reconstructed tokens: its value matches the
//! plain cosine loss, while the gradients of the easiest tokens shrink.
//!
//! ```text
//! cargo run --release --example loose_loss
//! ```

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dinolab::objective::{discard_rate, loose_loss, plain_cosine_loss, GroupPair, LooseLossConfig};

fn main() -> dinolab::Result<()> {
    let cfg = LooseLossConfig::default();
    println!("discard rate schedule:");
    for it in [0, 250, 500, 750, 1000, 4000] {
        println!("  iter {it:>5}: {:.3}", discard_rate(it, &cfg));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (batch, tokens, dim) = (2, 16, 8);
    let target = Array2::from_shape_simple_fn((batch * tokens, dim), || rng.random_range(-1.0..1.0));
    // the reconstruction error grows with the token index
    let recon = Array2::from_shape_fn((batch * tokens, dim), |(i, j)| {
        target[[i, j]] + (i % tokens) as f64 * 0.05 * rng.random_range(-1.0..1.0)
    });
    let pairs = [GroupPair { target, recon }];

    let plain = plain_cosine_loss(&pairs, batch)?;
    let loose = loose_loss(&pairs, batch, 500, &cfg)?;
    println!("\nloss: plain {:.6}, loose {:.6}", plain.loss, loose.loss);
    println!("damped tokens at iter 500: {} of {}", loose.damped[0], batch * tokens);

    let norms = |g: &Array2<f64>| g.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let (p, l) = (norms(&plain.recon_grads[0]), norms(&loose.recon_grads[0]));
    println!("\n{:>5} {:>8} {:>12} {:>12}", "token", "damped", "|grad| plain", "|grad| loose");
    for i in 0..tokens {
        println!("{i:>5} {:>8} {:>12.3e} {:>12.3e}", loose.damped_mask[0][i], p[i], l[i]);
    }
    Ok(())
}
