//! Single-head attention kernels with hand-written backward passes.
//!
//! Inputs are `N × d_h` views for one sample and one head. Both mixers return
//! rows that are convex combinations of the value rows.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::nn::Scalar;

/// Kernel feature map `elu(x) + 1`, strictly positive.
#[inline]
pub fn elu_plus_one<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + F::one()
    } else {
        x.exp()
    }
}

#[inline]
fn elu_plus_one_grad<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else {
        x.exp()
    }
}

/// `φ(Q)(φ(K)ᵀV)` normalised row-wise by `φ(Q)(φ(K)ᵀ1)`; `O(N·d_h²)`.
pub fn linear_attention<F: Scalar>(q: ArrayView2<F>, k: ArrayView2<F>, v: ArrayView2<F>) -> Array2<F> {
    assert_eq!(q.dim(), k.dim(), "query/key shape mismatch");
    assert_eq!(k.nrows(), v.nrows(), "key/value length mismatch");
    let qf = q.mapv(elu_plus_one);
    let kf = k.mapv(elu_plus_one);
    let kv = kf.t().dot(&v);
    let ksum = kf.sum_axis(Axis(0));
    let mut out = qf.dot(&kv);
    let den = qf.dot(&ksum);
    for (mut row, &d) in out.outer_iter_mut().zip(den.iter()) {
        assert!(d > F::zero(), "linear attention normaliser must be positive");
        let inv = F::one() / d;
        row.mapv_inplace(|x| x * inv);
    }
    out
}

/// Gradients `(dQ, dK, dV)` of [`linear_attention`] given `dOut`.
pub fn linear_attention_backward<F: Scalar>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    dout: ArrayView2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let qf = q.mapv(elu_plus_one);
    let kf = k.mapv(elu_plus_one);
    let kv = kf.t().dot(&v);
    let ksum = kf.sum_axis(Axis(0));
    let den = qf.dot(&ksum);
    let inv = den.mapv(|d| F::one() / d);

    // out = num / den
    let mut dnum = dout.to_owned();
    for (mut row, &i) in dnum.outer_iter_mut().zip(inv.iter()) {
        row.mapv_inplace(|x| x * i);
    }
    // dden_n = -Σ_j dout_nj num_nj / den_n² = -Σ_j dnum_nj out_nj
    let num = qf.dot(&kv);
    let dden: Array1<F> = Zip::from(dnum.rows())
        .and(num.rows())
        .and(&inv)
        .map_collect(|g, n, &i| -g.iter().zip(n.iter()).map(|(&a, &b)| a * b).sum::<F>() * i);

    let mut dqf = dnum.dot(&kv.t());
    for (mut row, &dd) in dqf.outer_iter_mut().zip(dden.iter()) {
        row.scaled_add(dd, &ksum);
    }
    let dkv = qf.t().dot(&dnum);
    let dksum = qf.t().dot(&dden);
    let mut dkf = v.dot(&dkv.t());
    for mut row in dkf.outer_iter_mut() {
        row += &dksum;
    }
    let dv = kf.dot(&dkv);

    Zip::from(&mut dqf).and(&q).for_each(|g, &x| *g = *g * elu_plus_one_grad(x));
    Zip::from(&mut dkf).and(&k).for_each(|g, &x| *g = *g * elu_plus_one_grad(x));
    (dqf, dkf, dv)
}

/// Explicit `N × N` row weights of linear attention (inspection only).
pub fn linear_attention_weights<F: Scalar>(q: ArrayView2<F>, k: ArrayView2<F>) -> Array2<F> {
    let qf = q.mapv(elu_plus_one);
    let kf = k.mapv(elu_plus_one);
    normalize_rows(qf.dot(&kf.t()))
}

fn normalize_rows<F: Scalar>(mut w: Array2<F>) -> Array2<F> {
    for mut row in w.outer_iter_mut() {
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    w
}

fn softmax_rows<F: Scalar>(mut s: Array2<F>) -> Array2<F> {
    for mut row in s.outer_iter_mut() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    s
}

/// Softmax row weights `softmax(QKᵀ/√d_h)`.
pub fn softmax_attention_weights<F: Scalar>(q: ArrayView2<F>, k: ArrayView2<F>) -> Array2<F> {
    let scale = F::one() / F::from_usize(q.ncols()).unwrap().sqrt();
    let mut s = q.dot(&k.t());
    s.mapv_inplace(|x| x * scale);
    softmax_rows(s)
}

/// Scaled dot-product attention; `O(N²·d_h)`.
pub fn softmax_attention<F: Scalar>(q: ArrayView2<F>, k: ArrayView2<F>, v: ArrayView2<F>) -> Array2<F> {
    assert_eq!(q.dim(), k.dim(), "query/key shape mismatch");
    assert_eq!(k.nrows(), v.nrows(), "key/value length mismatch");
    softmax_attention_weights(q, k).dot(&v)
}

pub fn softmax_attention_backward<F: Scalar>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    dout: ArrayView2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let scale = F::one() / F::from_usize(q.ncols()).unwrap().sqrt();
    let p = softmax_attention_weights(q, k);
    let dv = p.t().dot(&dout);
    let mut ds = dout.dot(&v.t());
    for (mut row, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
        let dot = row.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<F>();
        Zip::from(&mut row).and(&prow).for_each(|g, &pp| *g = pp * (*g - dot) * scale);
    }
    let dq = ds.dot(&k);
    let dk = ds.t().dot(&q);
    (dq, dk, dv)
}

/// Mean Shannon entropy (nats) of the rows of a row-stochastic matrix.
pub fn mean_row_entropy<F: Scalar>(w: ArrayView2<F>) -> f64 {
    let n = w.nrows().max(1) as f64;
    w.outer_iter()
        .map(|row| {
            -row.iter()
                .map(|&p| p.as_f64())
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        trunc_normal(rng, (n, d), 1.0)
    }

    #[test]
    fn single_token_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, k, v) = (random(&mut rng, 1, 8), random(&mut rng, 1, 8), random(&mut rng, 1, 8));
        for out in [linear_attention(q.view(), k.view(), v.view()), softmax_attention(q.view(), k.view(), v.view())] {
            for (a, b) in out.iter().zip(v.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(&mut rng, 5, 4);
        let krow = random(&mut rng, 1, 4);
        let k = Array2::from_shape_fn((5, 4), |(_, j)| krow[[0, j]]);
        let v = random(&mut rng, 5, 3);
        let mean = v.mean_axis(Axis(0)).unwrap();
        let out = linear_attention(q.view(), k.view(), v.view());
        for row in out.outer_iter() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let zeros = Array2::<f64>::zeros((5, 4));
        let out = softmax_attention(q.view(), zeros.view(), v.view());
        for row in out.outer_iter() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k) = (random(&mut rng, 6, 4), random(&mut rng, 6, 4));
        for w in [linear_attention_weights(q.view(), k.view()), softmax_attention_weights(q.view(), k.view())] {
            for row in w.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&x| x > 0.0));
            }
        }
        let uniform = Array2::from_elem((4, 4), 0.25);
        assert!((mean_row_entropy(uniform.view()) - 4f64.ln()).abs() < 1e-12);
    }
}
