//! Minimal dense building blocks with explicit forward and backward passes.
//!
//! Every trainable structure implements [`Parameterized`], which walks its
//! tensors in a fixed order. A gradient buffer is simply a zeroed clone of the
//! module it belongs to, so optimizers can zip parameters with gradients by
//! visiting both in lockstep.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Floating point element type accepted by the numeric kernels.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Hyperbolic tangent used inside activations.
    fn act_tanh(self) -> Self {
        self.tanh()
    }
}

impl Scalar for f32 {
    /// Branch-free rational approximation (a few ulp) that the compiler can vectorize.
    #[inline]
    fn act_tanh(self) -> f32 {
        const A: [f32; 7] = [
            4.893_524_6e-3,
            6.372_619_3e-4,
            1.485_722_4e-5,
            5.122_297e-8,
            -8.604_671_5e-11,
            2.000_187_9e-13,
            -2.760_768_5e-16,
        ];
        const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
        let x = self.clamp(-7.905_311, 7.905_311);
        let x2 = x * x;
        let p = x * (A[0] + x2 * (A[1] + x2 * (A[2] + x2 * (A[3] + x2 * (A[4] + x2 * (A[5] + x2 * A[6]))))));
        let q = B[0] + x2 * (B[1] + x2 * (B[2] + x2 * B[3]));
        p / q
    }
}
impl Scalar for f64 {}

/// Walks the trainable tensors of a module in a stable order.
pub trait Parameterized<F: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>));

    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut out = self.clone();
        out.visit_mut("", &mut |_, mut v| v.fill(F::zero()));
        out
    }

    fn zero_(&mut self) {
        self.visit_mut("", &mut |_, mut v| v.fill(F::zero()));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit("", &mut |name, v| {
            hasher.update(name.as_bytes());
            for d in v.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                hasher.update(x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }

    /// Squared L2 norm over every tensor, useful for gradient diagnostics.
    fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit("", &mut |_, v| acc += v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>());
        acc
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Truncated normal sample clipped at two standard deviations (ViT convention).
pub fn trunc_normal<F: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<F> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return F::from_f64c(v);
        }
    })
}

/// Affine map `y = x W + b` with `W` stored input-major (`in × out`).
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((input, output)), bias: Array1::zeros(output) }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, std: f64) -> Self {
        Self { weight: trunc_normal(rng, (input, output), std), bias: Array1::zeros(output) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Linear<F>) -> Array2<F> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    pub fn backward_params(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Linear<F>) {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl<F: Scalar> Parameterized<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        f(join(prefix, "weight"), self.weight.view().into_dyn());
        f(join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        f(join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub eps: f64,
}

/// Saved statistics for [`LayerNorm::backward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self { gamma: Array1::ones(dim), beta: Array1::zeros(dim), eps }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = F::from_usize(x.ncols()).unwrap();
        let eps = F::from_f64c(self.eps);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.iter().copied().sum::<F>() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / d;
            let inv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *s = inv;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn apply(&self, x: ArrayView2<F>) -> Array2<F> {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: ArrayView2<F>, grad: &mut LayerNorm<F>) -> Array2<F> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = F::from_usize(dy.ncols()).unwrap();
        let mut dx = &dy * &self.gamma;
        for ((mut row, xh), &inv) in dx.outer_iter_mut().zip(cache.xhat.outer_iter()).zip(cache.inv_std.iter()) {
            let mean_d = row.iter().copied().sum::<F>() / d;
            let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
            Zip::from(&mut row).and(&xh).for_each(|r, &h| *r = (*r - mean_d - h * mean_dx) * inv);
        }
        dx
    }
}

impl<F: Scalar> Parameterized<F> for LayerNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        f(join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(join(prefix, "beta"), self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        f(join(prefix, "gamma"), self.gamma.view_mut().into_dyn());
        f(join(prefix, "beta"), self.beta.view_mut().into_dyn());
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: ArrayView2<F>) -> Array2<F> {
    let c = F::from_f64c(GELU_C);
    let a = F::from_f64c(GELU_A);
    let half = F::from_f64c(0.5);
    x.mapv(|v| half * v * (F::one() + (c * (v + a * v * v * v)).act_tanh()))
}

pub fn gelu_backward<F: Scalar>(x: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let c = F::from_f64c(GELU_C);
    let a = F::from_f64c(GELU_A);
    let three_a = F::from_f64c(3.0 * GELU_A);
    let half = F::from_f64c(0.5);
    let mut out = Array2::zeros(x.raw_dim());
    Zip::from(&mut out).and(&x).and(&dy).for_each(|o, &v, &g| {
        let t = (c * (v + a * v * v * v)).act_tanh();
        let dt = (F::one() - t * t) * c * (F::one() + three_a * v * v);
        *o = g * (half * (F::one() + t) + half * v * dt);
    });
    out
}

/// Error function, Abramowitz–Stegun 7.1.26 (absolute error below 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Exact (erf-based) GELU, the activation used by pretrained ViT backbones.
pub fn gelu_erf(x: ArrayView2<f32>) -> Array2<f32> {
    x.mapv(|v| (0.5 * v as f64 * (1.0 + erf(v as f64 / std::f64::consts::SQRT_2))) as f32)
}
