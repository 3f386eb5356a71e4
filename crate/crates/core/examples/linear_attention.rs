//! Compares the linear and softmax attention kernels on random inputs:
//! agreement of the two association orders, wall time as the token count
//! grows, and how spread out the row weights are.
//!
//! ```text
//! cargo run --release --example linear_attention
//! ```

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dinolab::decoder::{
    linear_attention, linear_attention_weights, mean_row_entropy, softmax_attention, softmax_attention_weights,
};

fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

fn millis(f: impl Fn()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = 64;

    let (q, k, v) = (random(&mut rng, 196, d), random(&mut rng, 196, d), random(&mut rng, 196, d));
    let explicit = linear_attention_weights(q.view(), k.view()).dot(&v);
    let factored = linear_attention(q.view(), k.view(), v.view());
    let gap = (&explicit - &factored).iter().fold(0.0f32, |m, x| m.max(x.abs()));
    println!("(φ(Q)φ(K)ᵀ)V vs φ(Q)(φ(K)ᵀV): max difference {gap:.2e}");

    let hl = mean_row_entropy(linear_attention_weights(q.view(), k.view()).view());
    let hs = mean_row_entropy(softmax_attention_weights(q.view(), k.view()).view());
    println!("mean row entropy: linear {hl:.3} nats, softmax {hs:.3} nats, uniform {:.3}", (196f64).ln());

    println!("\n{:>6} {:>12} {:>12}", "N", "linear ms", "softmax ms");
    for n in [256, 1024, 4096] {
        let (q, k, v) = (random(&mut rng, n, d), random(&mut rng, n, d), random(&mut rng, n, d));
        let lin = millis(|| drop(linear_attention(q.view(), k.view(), v.view())));
        let soft = millis(|| drop(softmax_attention(q.view(), k.view(), v.view())));
        println!("{n:>6} {lin:>12.2} {soft:>12.2}");
    }
}
